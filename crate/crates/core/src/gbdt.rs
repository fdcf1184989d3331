//! Gradient-boosted regression trees for binary classification with the
//! logistic loss, plus stratified k-fold CV and randomized search.

use std::fmt::Write as _;

use rand::seq::{index::sample, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::metrics::harmonic_mean;
use crate::model::sigmoid;

#[derive(Debug, Clone, PartialEq)]
pub struct GbdtParams {
    pub n_estimators: usize,
    pub max_depth: usize,
    pub colsample_bytree: f64,
    pub colsample_bylevel: f64,
    pub learning_rate: f64,
    pub min_samples_leaf: usize,
    /// L2 penalty on leaf values.
    pub lambda: f64,
}

impl Default for GbdtParams {
    fn default() -> Self {
        GbdtParams {
            n_estimators: 100,
            max_depth: 3,
            colsample_bytree: 1.0,
            colsample_bylevel: 1.0,
            learning_rate: 0.3,
            min_samples_leaf: 1,
            lambda: 0.0,
        }
    }
}

impl GbdtParams {
    pub fn validate(&self) -> Result<()> {
        let frac = |x: f64| x > 0.0 && x <= 1.0;
        if !frac(self.colsample_bytree) || !frac(self.colsample_bylevel) {
            return Err(Error::invalid("column sample fractions must lie in (0, 1]"));
        }
        if self.max_depth == 0 || self.min_samples_leaf == 0 {
            return Err(Error::invalid("max_depth and min_samples_leaf must be positive"));
        }
        if !(self.learning_rate > 0.0) || !(self.lambda >= 0.0) {
            return Err(Error::invalid("learning_rate must be positive and lambda non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Node {
    Leaf(f64),
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tree {
    nodes: Vec<Node>,
}

impl Tree {
    fn predict(&self, x: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            match self.nodes[i] {
                Node::Leaf(v) => return v,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => i = if x[feature] < threshold { left } else { right },
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn go(t: &Tree, i: usize) -> usize {
            match t.nodes[i] {
                Node::Leaf(_) => 0,
                Node::Split { left, right, .. } => 1 + go(t, left).max(go(t, right)),
            }
        }
        go(self, 0)
    }

    /// Feature indices used by any split.
    pub fn features(&self) -> Vec<usize> {
        self.nodes
            .iter()
            .filter_map(|n| match n {
                Node::Split { feature, .. } => Some(*feature),
                Node::Leaf(_) => None,
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GbdtModel {
    pub base_score: f64,
    pub learning_rate: f64,
    pub n_features: usize,
    pub trees: Vec<Tree>,
    /// Set when training saw a single class and no trees were grown.
    pub degenerate: bool,
}

impl GbdtModel {
    fn raw(&self, x: &[f64], n_trees: usize) -> f64 {
        self.base_score
            + self.trees[..n_trees.min(self.trees.len())]
                .iter()
                .map(|t| self.learning_rate * t.predict(x))
                .sum::<f64>()
    }

    fn check(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.n_features {
            return Err(Error::ShapeMismatch {
                expected: self.n_features,
                got: x.len(),
            });
        }
        Ok(())
    }

    /// Probability of the positive class.
    pub fn predict_proba(&self, x: &[f64]) -> Result<f64> {
        self.check(x)?;
        Ok(sigmoid(self.raw(x, self.trees.len())))
    }

    /// Mean logistic loss using only the first `n_trees` trees.
    pub fn log_loss(&self, xs: &[Vec<f64>], ys: &[bool], n_trees: usize) -> Result<f64> {
        let mut total = 0.0;
        for (x, &y) in xs.iter().zip(ys) {
            self.check(x)?;
            let f = self.raw(x, n_trees);
            // log(1 + e^{-f}) for y = 1, log(1 + e^{f}) for y = 0
            let z = if y { -f } else { f };
            total += z.max(0.0) + (-z.abs()).exp().ln_1p();
        }
        Ok(total / xs.len().max(1) as f64)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("#gbdt v1\n");
        let _ = writeln!(s, "n_features {}", self.n_features);
        let _ = writeln!(s, "base_score {}", self.base_score);
        let _ = writeln!(s, "learning_rate {}", self.learning_rate);
        let _ = writeln!(s, "degenerate {}", self.degenerate);
        for t in &self.trees {
            s.push_str("tree\n");
            fn emit(t: &Tree, i: usize, s: &mut String) {
                match t.nodes[i] {
                    Node::Leaf(v) => {
                        let _ = writeln!(s, "L {v}");
                    }
                    Node::Split {
                        feature,
                        threshold,
                        left,
                        right,
                    } => {
                        let _ = writeln!(s, "S {feature} {threshold}");
                        emit(t, left, s);
                        emit(t, right, s);
                    }
                }
            }
            emit(t, 0, &mut s);
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()).peekable();
        let mut next = |want: &str| -> Result<(usize, String)> {
            let (i, l) = lines.next().ok_or_else(|| Error::parse(0, format!("missing `{want}`")))?;
            Ok((i + 1, l.trim().to_string()))
        };
        let (ln, magic) = next("#gbdt v1")?;
        if magic != "#gbdt v1" {
            return Err(Error::parse(ln, "expected `#gbdt v1` header"));
        }
        fn field<N: std::str::FromStr>(ln: usize, line: &str, key: &str) -> Result<N> {
            line.strip_prefix(key)
                .and_then(|v| v.trim().parse().ok())
                .ok_or_else(|| Error::parse(ln, format!("expected `{key} <value>`")))
        }
        let (ln, l) = next("n_features")?;
        let n_features: usize = field(ln, &l, "n_features")?;
        let (ln, l) = next("base_score")?;
        let base_score: f64 = field(ln, &l, "base_score")?;
        let (ln, l) = next("learning_rate")?;
        let learning_rate: f64 = field(ln, &l, "learning_rate")?;
        let (ln, l) = next("degenerate")?;
        let degenerate: bool = field(ln, &l, "degenerate")?;

        let rest: Vec<(usize, String)> = std::iter::from_fn(|| next("").ok()).collect();
        let mut trees = Vec::new();
        let mut pos = 0;
        fn parse_node(rest: &[(usize, String)], pos: &mut usize, nodes: &mut Vec<Node>, nf: usize) -> Result<usize> {
            let (ln, line) = rest.get(*pos).ok_or_else(|| Error::parse(0, "truncated tree"))?;
            *pos += 1;
            let parts: Vec<&str> = line.split_whitespace().collect();
            let idx = nodes.len();
            match parts.as_slice() {
                ["L", v] => {
                    let v = v.parse().map_err(|_| Error::parse(*ln, "bad leaf value"))?;
                    nodes.push(Node::Leaf(v));
                }
                ["S", f, t] => {
                    let feature: usize = f.parse().map_err(|_| Error::parse(*ln, "bad feature index"))?;
                    if feature >= nf {
                        return Err(Error::parse(*ln, "feature index out of range"));
                    }
                    let threshold = t.parse().map_err(|_| Error::parse(*ln, "bad threshold"))?;
                    nodes.push(Node::Leaf(0.0));
                    let left = parse_node(rest, pos, nodes, nf)?;
                    let right = parse_node(rest, pos, nodes, nf)?;
                    nodes[idx] = Node::Split {
                        feature,
                        threshold,
                        left,
                        right,
                    };
                }
                _ => return Err(Error::parse(*ln, format!("bad node line `{line}`"))),
            }
            Ok(idx)
        }
        while pos < rest.len() {
            let (ln, l) = &rest[pos];
            if l != "tree" {
                return Err(Error::parse(*ln, "expected `tree`"));
            }
            pos += 1;
            let mut nodes = Vec::new();
            parse_node(&rest, &mut pos, &mut nodes, n_features)?;
            trees.push(Tree { nodes });
        }
        Ok(GbdtModel {
            base_score,
            learning_rate,
            n_features,
            trees,
            degenerate,
        })
    }
}

fn check_data(xs: &[Vec<f64>], ys: &[bool]) -> Result<usize> {
    if xs.len() != ys.len() {
        return Err(Error::ShapeMismatch {
            expected: xs.len(),
            got: ys.len(),
        });
    }
    if xs.len() < 2 {
        return Err(Error::Empty("need at least two samples"));
    }
    let f = xs[0].len();
    if f == 0 {
        return Err(Error::Empty("samples have no features"));
    }
    if let Some(bad) = xs.iter().find(|x| x.len() != f) {
        return Err(Error::ShapeMismatch {
            expected: f,
            got: bad.len(),
        });
    }
    Ok(f)
}

fn take_fraction(pool: &[usize], frac: f64, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let k = ((pool.len() as f64 * frac).ceil() as usize).clamp(1, pool.len());
    let mut picked: Vec<usize> = sample(rng, pool.len(), k).into_iter().map(|i| pool[i]).collect();
    picked.sort_unstable();
    picked
}

struct Builder<'a> {
    xs: &'a [Vec<f64>],
    g: &'a [f64],
    h: &'a [f64],
    params: &'a GbdtParams,
    levels: Vec<Vec<usize>>,
    nodes: Vec<Node>,
}

impl Builder<'_> {
    fn leaf_value(&self, idx: &[usize]) -> f64 {
        let gs: f64 = idx.iter().map(|&i| self.g[i]).sum();
        let hs: f64 = idx.iter().map(|&i| self.h[i]).sum();
        let den = hs + self.params.lambda;
        if den > 1e-12 {
            -gs / den
        } else {
            0.0
        }
    }

    fn best_split(&self, idx: &[usize], depth: usize) -> Option<(usize, f64, f64)> {
        let lam = self.params.lambda;
        let min_leaf = self.params.min_samples_leaf;
        let score = |g: f64, h: f64| if h + lam > 1e-12 { g * g / (h + lam) } else { 0.0 };
        let gt: f64 = idx.iter().map(|&i| self.g[i]).sum();
        let ht: f64 = idx.iter().map(|&i| self.h[i]).sum();
        let parent = score(gt, ht);
        let mut best: Option<(usize, f64, f64)> = None;
        let mut sorted = idx.to_vec();
        for &f in &self.levels[depth] {
            sorted.sort_by(|&a, &b| self.xs[a][f].total_cmp(&self.xs[b][f]).then(a.cmp(&b)));
            let (mut gl, mut hl) = (0.0, 0.0);
            for k in 0..sorted.len() - 1 {
                let i = sorted[k];
                gl += self.g[i];
                hl += self.h[i];
                let (a, b) = (self.xs[i][f], self.xs[sorted[k + 1]][f]);
                if a == b || k + 1 < min_leaf || sorted.len() - k - 1 < min_leaf {
                    continue;
                }
                let gain = score(gl, hl) + score(gt - gl, ht - hl) - parent;
                if gain > 1e-12 && best.map_or(true, |(_, _, bg)| gain > bg) {
                    best = Some((f, a + (b - a) / 2.0, gain));
                }
            }
        }
        best
    }

    fn build(&mut self, idx: &[usize], depth: usize) -> usize {
        let me = self.nodes.len();
        self.nodes.push(Node::Leaf(self.leaf_value(idx)));
        if depth >= self.params.max_depth || idx.len() < 2 * self.params.min_samples_leaf {
            return me;
        }
        if let Some((feature, threshold, _)) = self.best_split(idx, depth) {
            let (l, r): (Vec<usize>, Vec<usize>) = idx.iter().partition(|&&i| self.xs[i][feature] < threshold);
            let left = self.build(&l, depth + 1);
            let right = self.build(&r, depth + 1);
            self.nodes[me] = Node::Split {
                feature,
                threshold,
                left,
                right,
            };
        }
        me
    }
}

/// Fits `n_estimators` second-order boosting rounds.
pub fn fit(xs: &[Vec<f64>], ys: &[bool], params: &GbdtParams, seed: u64) -> Result<GbdtModel> {
    params.validate()?;
    let nf = check_data(xs, ys)?;
    let n = xs.len();
    let pos = ys.iter().filter(|&&y| y).count();
    let prior = (pos as f64 / n as f64).clamp(1e-6, 1.0 - 1e-6);
    let base_score = (prior / (1.0 - prior)).ln();
    let mut model = GbdtModel {
        base_score,
        learning_rate: params.learning_rate,
        n_features: nf,
        trees: Vec::new(),
        degenerate: pos == 0 || pos == n,
    };
    if model.degenerate {
        log::warn!("gbdt training labels contain a single class; returning the prior-only model");
        return Ok(model);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let all: Vec<usize> = (0..nf).collect();
    let mut raw = vec![base_score; n];
    let mut g = vec![0.0; n];
    let mut h = vec![0.0; n];
    let rows: Vec<usize> = (0..n).collect();
    for _ in 0..params.n_estimators {
        for i in 0..n {
            let p = sigmoid(raw[i]);
            g[i] = p - if ys[i] { 1.0 } else { 0.0 };
            h[i] = p * (1.0 - p);
        }
        let tree_cols = take_fraction(&all, params.colsample_bytree, &mut rng);
        let levels = (0..params.max_depth)
            .map(|_| take_fraction(&tree_cols, params.colsample_bylevel, &mut rng))
            .collect();
        let mut b = Builder {
            xs,
            g: &g,
            h: &h,
            params,
            levels,
            nodes: Vec::new(),
        };
        b.build(&rows, 0);
        let tree = Tree { nodes: b.nodes };
        for i in 0..n {
            raw[i] += params.learning_rate * tree.predict(&xs[i]);
        }
        model.trees.push(tree);
    }
    Ok(model)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CvResult {
    /// Held-out row indices of each fold.
    pub folds: Vec<Vec<usize>>,
    pub accuracy: Vec<f64>,
    pub f1_accept: Vec<f64>,
    pub f1_reject: Vec<f64>,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len().max(1) as f64;
    let m = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, var.sqrt())
}

impl CvResult {
    pub fn accuracy_mean_std(&self) -> (f64, f64) {
        mean_std(&self.accuracy)
    }

    pub fn f1_accept_mean_std(&self) -> (f64, f64) {
        mean_std(&self.f1_accept)
    }

    pub fn f1_reject_mean_std(&self) -> (f64, f64) {
        mean_std(&self.f1_reject)
    }

    pub fn mean_accuracy(&self) -> f64 {
        self.accuracy_mean_std().0
    }
}

/// Stratified fold assignment: each class is shuffled and dealt round-robin.
pub fn stratified_folds(ys: &[bool], k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k < 2 {
        return Err(Error::invalid("k-fold needs k >= 2"));
    }
    if ys.len() < k {
        return Err(Error::invalid(format!("{} samples cannot fill {k} folds", ys.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut folds = vec![Vec::new(); k];
    let mut next = 0;
    for class in [false, true] {
        let mut idx: Vec<usize> = (0..ys.len()).filter(|&i| ys[i] == class).collect();
        idx.shuffle(&mut rng);
        for i in idx {
            folds[next % k].push(i);
            next += 1;
        }
    }
    for f in &mut folds {
        f.sort_unstable();
    }
    Ok(folds)
}

fn f1_for(pred: &[bool], truth: &[bool], class: bool) -> f64 {
    let tp = pred.iter().zip(truth).filter(|&(&p, &t)| p == class && t == class).count() as f64;
    let pp = pred.iter().filter(|&&p| p == class).count() as f64;
    let ap = truth.iter().filter(|&&t| t == class).count() as f64;
    let prec = if pp > 0.0 { tp / pp } else { 0.0 };
    let rec = if ap > 0.0 { tp / ap } else { 0.0 };
    harmonic_mean(prec, rec)
}

pub fn kfold_cv(xs: &[Vec<f64>], ys: &[bool], params: &GbdtParams, k: usize, seed: u64) -> Result<CvResult> {
    check_data(xs, ys)?;
    let folds = stratified_folds(ys, k, seed)?;
    let mut res = CvResult {
        folds: folds.clone(),
        accuracy: Vec::new(),
        f1_accept: Vec::new(),
        f1_reject: Vec::new(),
    };
    for (fi, test) in folds.iter().enumerate() {
        let mut in_test = vec![false; xs.len()];
        for &i in test {
            in_test[i] = true;
        }
        let (tx, ty): (Vec<Vec<f64>>, Vec<bool>) = (0..xs.len())
            .filter(|&i| !in_test[i])
            .map(|i| (xs[i].clone(), ys[i]))
            .unzip();
        let model = fit(&tx, &ty, params, seed.wrapping_add(fi as u64 + 1))?;
        let pred = test
            .iter()
            .map(|&i| model.predict_proba(&xs[i]).map(|p| p >= 0.5))
            .collect::<Result<Vec<bool>>>()?;
        let truth: Vec<bool> = test.iter().map(|&i| ys[i]).collect();
        let correct = pred.iter().zip(&truth).filter(|(p, t)| p == t).count();
        res.accuracy.push(correct as f64 / test.len().max(1) as f64);
        res.f1_accept.push(f1_for(&pred, &truth, true));
        res.f1_reject.push(f1_for(&pred, &truth, false));
    }
    Ok(res)
}

/// Discrete candidate lists for the searched hyperparameters. Other fields
/// are copied from `base`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamDistributions {
    pub max_depth: Vec<usize>,
    pub colsample_bytree: Vec<f64>,
    pub colsample_bylevel: Vec<f64>,
    pub n_estimators: Vec<usize>,
    pub base: GbdtParams,
}

impl Default for ParamDistributions {
    fn default() -> Self {
        ParamDistributions {
            max_depth: vec![2, 3, 4, 5, 6],
            colsample_bytree: vec![0.5, 0.7, 0.9, 1.0],
            colsample_bylevel: vec![0.5, 0.7, 0.9, 1.0],
            n_estimators: vec![25, 50, 100, 200],
            base: GbdtParams::default(),
        }
    }
}

impl ParamDistributions {
    fn sample(&self, rng: &mut ChaCha8Rng) -> Result<GbdtParams> {
        fn pick<T: Copy>(xs: &[T], rng: &mut ChaCha8Rng, name: &str) -> Result<T> {
            if xs.is_empty() {
                return Err(Error::invalid(format!("empty search list for {name}")));
            }
            Ok(xs[rng.gen_range(0..xs.len())])
        }
        Ok(GbdtParams {
            max_depth: pick(&self.max_depth, rng, "max_depth")?,
            colsample_bytree: pick(&self.colsample_bytree, rng, "colsample_bytree")?,
            colsample_bylevel: pick(&self.colsample_bylevel, rng, "colsample_bylevel")?,
            n_estimators: pick(&self.n_estimators, rng, "n_estimators")?,
            ..self.base.clone()
        })
    }
}

/// Samples `n_iter` settings and returns the one with the best mean CV
/// accuracy; ties go to the earliest sample. Failing candidates are skipped.
pub fn randomized_search(
    xs: &[Vec<f64>],
    ys: &[bool],
    dist: &ParamDistributions,
    n_iter: usize,
    k: usize,
    seed: u64,
) -> Result<(GbdtParams, CvResult)> {
    if n_iter == 0 {
        return Err(Error::invalid("n_iter must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cands = (0..n_iter).map(|_| dist.sample(&mut rng)).collect::<Result<Vec<_>>>()?;
    let results: Vec<Result<CvResult>> = cands.par_iter().map(|p| kfold_cv(xs, ys, p, k, seed)).collect();
    let mut best: Option<(GbdtParams, CvResult)> = None;
    let mut last_err = None;
    for (p, r) in cands.into_iter().zip(results) {
        match r {
            Ok(cv) => {
                if best.as_ref().map_or(true, |(_, b)| cv.mean_accuracy() > b.mean_accuracy()) {
                    best = Some((p, cv));
                }
            }
            Err(e) => {
                log::warn!("skipping candidate {p:?}: {e}");
                last_err = Some(e);
            }
        }
    }
    best.ok_or_else(|| last_err.unwrap_or(Error::Empty("no search candidates")))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line_data(n: usize) -> (Vec<Vec<f64>>, Vec<bool>) {
        let xs: Vec<Vec<f64>> = (0..n).map(|i| vec![i as f64 - (n as f64 - 1.0) / 2.0, (i * 7 % 5) as f64]).collect();
        let ys = xs.iter().map(|x| x[0] > 0.0).collect();
        (xs, ys)
    }

    #[test]
    fn stump_separates_line() {
        let (xs, ys) = line_data(20);
        let p = GbdtParams {
            n_estimators: 1,
            max_depth: 1,
            learning_rate: 1.0,
            ..Default::default()
        };
        let m = fit(&xs, &ys, &p, 0).unwrap();
        for (x, &y) in xs.iter().zip(&ys) {
            assert_eq!(m.predict_proba(x).unwrap() >= 0.5, y);
        }
        assert_eq!(m.trees[0].features(), vec![0]);
    }

    #[test]
    fn zero_trees_and_single_class() {
        let (xs, ys) = line_data(10);
        let p = GbdtParams {
            n_estimators: 0,
            ..Default::default()
        };
        let m = fit(&xs, &ys, &p, 0).unwrap();
        assert!((m.predict_proba(&xs[0]).unwrap() - 0.5).abs() < 1e-12);
        let ones = vec![true; 10];
        let m = fit(&xs, &ones, &GbdtParams::default(), 0).unwrap();
        assert!(m.degenerate && m.trees.is_empty());
        assert!(m.predict_proba(&[0.0]).is_err());
    }

    #[test]
    fn text_round_trip() {
        let (xs, ys) = line_data(30);
        let m = fit(&xs, &ys, &GbdtParams::default(), 5).unwrap();
        let back = GbdtModel::from_text(&m.to_text()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn folds_partition_and_stratify() {
        let ys: Vec<bool> = (0..23).map(|i| i % 3 == 0).collect();
        let folds = stratified_folds(&ys, 5, 9).unwrap();
        let mut all: Vec<usize> = folds.iter().flatten().copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..23).collect::<Vec<_>>());
        let pos: Vec<usize> = folds.iter().map(|f| f.iter().filter(|&&i| ys[i]).count()).collect();
        assert!(pos.iter().max().unwrap() - pos.iter().min().unwrap() <= 1);
        assert!(stratified_folds(&ys[..3], 5, 0).is_err());
    }
}
