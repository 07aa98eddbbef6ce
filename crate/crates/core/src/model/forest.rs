use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::dataset::Dataset;
use super::ModelError;

const MAX_BINS: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForestMode {
    /// Gini splits over price classes.
    Classification,
    /// Variance splits over log prices.
    Regression,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForestParams {
    pub n_trees: usize,
    /// `None` grows until leaves are pure or too small to split.
    pub max_depth: Option<usize>,
    pub min_leaf: usize,
    /// Features tried per split; `None` means ⌈√d⌉.
    pub features_per_split: Option<usize>,
}

impl Default for ForestParams {
    fn default() -> Self {
        ForestParams { n_trees: 100, max_depth: None, min_leaf: 5, features_per_split: None }
    }
}

impl ForestParams {
    pub fn mtry(&self, n_features: usize) -> usize {
        self.features_per_split
            .unwrap_or_else(|| (n_features as f64).sqrt().ceil() as usize)
            .clamp(1, n_features.max(1))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Node {
    /// `[feature, threshold, left, right]`; rows with `x <= threshold` go left.
    #[serde(rename = "s")]
    Split(u32, f32, u32, u32),
    /// Majority class and class vote distribution.
    #[serde(rename = "l")]
    Leaf(u8, Vec<f32>),
    /// Mean log price of a regression leaf.
    #[serde(rename = "v")]
    Value(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    pub fn leaf(&self, x: &[f32]) -> &Node {
        let mut i = 0usize;
        loop {
            match &self.nodes[i] {
                Node::Split(f, t, l, r) => i = if x[*f as usize] <= *t { *l as usize } else { *r as usize },
                leaf => return leaf,
            }
        }
    }

    pub fn predict_class(&self, x: &[f32]) -> usize {
        match self.leaf(x) {
            Node::Leaf(c, _) => *c as usize,
            _ => 0,
        }
    }

    pub fn depth(&self) -> usize {
        fn go(nodes: &[Node], i: usize) -> usize {
            match &nodes[i] {
                Node::Split(_, _, l, r) => 1 + go(nodes, *l as usize).max(go(nodes, *r as usize)),
                _ => 0,
            }
        }
        go(&self.nodes, 0)
    }

    fn validate(&self, n_features: usize, n_classes: usize) -> Result<(), String> {
        if self.nodes.is_empty() {
            return Err("empty tree".into());
        }
        for (i, node) in self.nodes.iter().enumerate() {
            match node {
                Node::Split(f, t, l, r) => {
                    if *f as usize >= n_features {
                        return Err(format!("node {i}: feature {f} out of range"));
                    }
                    if !t.is_finite() {
                        return Err(format!("node {i}: non-finite threshold"));
                    }
                    // Children always follow their parent, which rules out cycles.
                    for c in [*l as usize, *r as usize] {
                        if c <= i || c >= self.nodes.len() {
                            return Err(format!("node {i}: bad child {c}"));
                        }
                    }
                }
                Node::Leaf(c, dist) => {
                    if *c as usize >= n_classes || dist.len() != n_classes {
                        return Err(format!("node {i}: leaf class/distribution mismatch"));
                    }
                    let s: f32 = dist.iter().sum();
                    if (s - 1.0).abs() > 1e-3 || dist.iter().any(|p| !(0.0..=1.0).contains(p)) {
                        return Err(format!("node {i}: leaf distribution does not sum to 1"));
                    }
                }
                Node::Value(v) => {
                    if !v.is_finite() {
                        return Err(format!("node {i}: non-finite value"));
                    }
                }
            }
        }
        Ok(())
    }
}

/// An ensemble of trees with its training parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Forest {
    pub mode: ForestMode,
    pub params: ForestParams,
    pub n_features: usize,
    pub n_classes: usize,
    pub seed: u64,
    pub trees: Vec<Tree>,
    /// Out-of-bag misclassification rate (classification) or mean squared
    /// error (regression).
    pub oob_error: f64,
}

/// Per-feature cut points and the binned training matrix (column-major).
struct Binned {
    cuts: Vec<Vec<f32>>,
    bins: Vec<Vec<u8>>,
}

fn midpoint(a: f32, b: f32) -> f32 {
    let m = ((f64::from(a) + f64::from(b)) / 2.0) as f32;
    if m >= b {
        a
    } else {
        m
    }
}

fn bin_features(data: &Dataset) -> Binned {
    let n = data.len();
    let d = data.n_features;
    let per_feature: Vec<(Vec<f32>, Vec<u8>)> = (0..d)
        .into_par_iter()
        .map(|f| {
            let mut vals: Vec<f32> = (0..n).map(|i| data.x[i * d + f]).collect();
            vals.sort_by(f32::total_cmp);
            vals.dedup();
            let cuts: Vec<f32> = if vals.len() <= MAX_BINS {
                vals.windows(2).map(|w| midpoint(w[0], w[1])).collect()
            } else {
                let mut c: Vec<f32> = (1..MAX_BINS)
                    .map(|j| {
                        let i = j * vals.len() / MAX_BINS;
                        midpoint(vals[i - 1], vals[i])
                    })
                    .collect();
                c.dedup();
                c
            };
            let bins = (0..n).map(|i| cuts.partition_point(|&c| c < data.x[i * d + f]) as u8).collect();
            (cuts, bins)
        })
        .collect();
    let (cuts, bins) = per_feature.into_iter().unzip();
    Binned { cuts, bins }
}

struct Grower<'a> {
    data: &'a Dataset,
    binned: &'a Binned,
    params: ForestParams,
    mode: ForestMode,
    mtry: usize,
}

struct Best {
    score: f64,
    feature: usize,
    bin: usize,
}

impl Grower<'_> {
    fn leaf(&self, idx: &[u32]) -> Node {
        match self.mode {
            ForestMode::Classification => {
                let k = self.data.n_classes;
                let mut counts = vec![0u32; k];
                for &i in idx {
                    counts[self.data.labels[i as usize]] += 1;
                }
                let total = idx.len().max(1) as f32;
                let mut best = 0;
                for c in 1..k {
                    if counts[c] > counts[best] {
                        best = c;
                    }
                }
                Node::Leaf(best as u8, counts.iter().map(|&c| c as f32 / total).collect())
            }
            ForestMode::Regression => {
                let s: f64 = idx.iter().map(|&i| self.data.targets[i as usize]).sum();
                Node::Value(s / idx.len().max(1) as f64)
            }
        }
    }

    fn is_pure(&self, idx: &[u32]) -> bool {
        match self.mode {
            ForestMode::Classification => {
                let first = self.data.labels[idx[0] as usize];
                idx.iter().all(|&i| self.data.labels[i as usize] == first)
            }
            ForestMode::Regression => {
                let first = self.data.targets[idx[0] as usize];
                idx.iter().all(|&i| self.data.targets[i as usize] == first)
            }
        }
    }

    /// Best split over one feature; the score is the quantity a split
    /// maximizes (sum of squared class counts over side size for Gini,
    /// squared target sum over side size for variance).
    fn best_for_feature(&self, f: usize, idx: &[u32], hist: &mut Vec<f64>) -> Option<(f64, usize)> {
        let nb = self.binned.cuts[f].len() + 1;
        if nb < 2 {
            return None;
        }
        let bins = &self.binned.bins[f];
        let min_leaf = self.params.min_leaf.max(1);
        let n = idx.len();
        match self.mode {
            ForestMode::Classification => {
                let k = self.data.n_classes;
                hist.clear();
                hist.resize(nb * k, 0.0);
                for &i in idx {
                    hist[bins[i as usize] as usize * k + self.data.labels[i as usize]] += 1.0;
                }
                let mut total = vec![0.0; k];
                for b in 0..nb {
                    for c in 0..k {
                        total[c] += hist[b * k + c];
                    }
                }
                let mut left = vec![0.0; k];
                let mut n_left = 0usize;
                let mut best: Option<(f64, usize)> = None;
                for b in 0..nb - 1 {
                    for c in 0..k {
                        left[c] += hist[b * k + c];
                    }
                    let added: f64 = (0..k).map(|c| hist[b * k + c]).sum();
                    n_left += added as usize;
                    if added == 0.0 || n_left < min_leaf {
                        continue;
                    }
                    let n_right = n - n_left;
                    if n_right < min_leaf {
                        break;
                    }
                    let (mut sl, mut sr) = (0.0, 0.0);
                    for c in 0..k {
                        sl += left[c] * left[c];
                        let r = total[c] - left[c];
                        sr += r * r;
                    }
                    let score = sl / n_left as f64 + sr / n_right as f64;
                    if best.is_none_or(|(s, _)| score > s) {
                        best = Some((score, b));
                    }
                }
                best
            }
            ForestMode::Regression => {
                hist.clear();
                hist.resize(nb * 2, 0.0);
                for &i in idx {
                    let b = bins[i as usize] as usize;
                    hist[b * 2] += 1.0;
                    hist[b * 2 + 1] += self.data.targets[i as usize];
                }
                let total: f64 = (0..nb).map(|b| hist[b * 2 + 1]).sum();
                let (mut n_left, mut s_left) = (0usize, 0.0);
                let mut best: Option<(f64, usize)> = None;
                for b in 0..nb - 1 {
                    let added = hist[b * 2];
                    n_left += added as usize;
                    s_left += hist[b * 2 + 1];
                    if added == 0.0 || n_left < min_leaf {
                        continue;
                    }
                    let n_right = n - n_left;
                    if n_right < min_leaf {
                        break;
                    }
                    let s_right = total - s_left;
                    let score = s_left * s_left / n_left as f64 + s_right * s_right / n_right as f64;
                    if best.is_none_or(|(s, _)| score > s) {
                        best = Some((score, b));
                    }
                }
                best
            }
        }
    }

    fn parent_score(&self, idx: &[u32]) -> f64 {
        let n = idx.len() as f64;
        match self.mode {
            ForestMode::Classification => {
                let mut counts = vec![0.0; self.data.n_classes];
                for &i in idx {
                    counts[self.data.labels[i as usize]] += 1.0;
                }
                counts.iter().map(|c| c * c).sum::<f64>() / n
            }
            ForestMode::Regression => {
                let s: f64 = idx.iter().map(|&i| self.data.targets[i as usize]).sum();
                s * s / n
            }
        }
    }

    fn grow(&self, mut idx: Vec<u32>, rng: &mut ChaCha8Rng) -> Tree {
        let d = self.data.n_features;
        let mut nodes: Vec<Node> = vec![Node::Value(0.0)];
        // (node slot, start, end, depth)
        let mut stack = vec![(0usize, 0usize, idx.len(), 0usize)];
        let mut hist = Vec::new();
        while let Some((slot, start, end, depth)) = stack.pop() {
            let part = &mut idx[start..end];
            let n = part.len();
            let depth_ok = self.params.max_depth.is_none_or(|m| depth < m);
            let mut best: Option<Best> = None;
            if depth_ok && n >= 2 * self.params.min_leaf.max(1) && !self.is_pure(part) {
                let parent = self.parent_score(part);
                for f in sample(rng, d, self.mtry) {
                    if let Some((score, bin)) = self.best_for_feature(f, part, &mut hist) {
                        if score > parent + 1e-9 && best.as_ref().is_none_or(|b| score > b.score) {
                            best = Some(Best { score, feature: f, bin });
                        }
                    }
                }
            }
            let Some(best) = best else {
                nodes[slot] = self.leaf(part);
                continue;
            };
            let bins = &self.binned.bins[best.feature];
            let mut lo = 0usize;
            for j in 0..n {
                if bins[part[j] as usize] as usize <= best.bin {
                    part.swap(lo, j);
                    lo += 1;
                }
            }
            let l = nodes.len();
            nodes.push(Node::Value(0.0));
            nodes.push(Node::Value(0.0));
            nodes[slot] =
                Node::Split(best.feature as u32, self.binned.cuts[best.feature][best.bin], l as u32, l as u32 + 1);
            stack.push((l + 1, start + lo, end, depth + 1));
            stack.push((l, start, start + lo, depth + 1));
        }
        Tree { nodes }
    }
}

fn tree_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

impl Forest {
    /// Grows `params.n_trees` trees on bootstrap samples. Each tree draws
    /// from its own random stream derived from `seed` and the tree index, so
    /// the result does not depend on thread scheduling.
    pub fn fit(data: &Dataset, params: ForestParams, mode: ForestMode, seed: u64) -> Result<Forest, ModelError> {
        if data.is_empty() {
            return Err(ModelError::InsufficientSamples { needed: 1, got: 0 });
        }
        if params.n_trees == 0 {
            return Err(ModelError::InvalidParameter("n_trees must be positive".into()));
        }
        if mode == ForestMode::Classification && data.class_counts().iter().filter(|&&c| c > 0).count() < 2 {
            return Err(ModelError::SingleClassData);
        }
        let binned = bin_features(data);
        let grower = Grower { data, binned: &binned, params, mode, mtry: params.mtry(data.n_features) };
        let n = data.len();
        let grown: Vec<(Tree, Vec<bool>)> = (0..params.n_trees)
            .into_par_iter()
            .map(|t| {
                let mut rng = tree_rng(seed, t);
                let mut in_bag = vec![false; n];
                let idx: Vec<u32> = (0..n)
                    .map(|_| {
                        let i = rng.random_range(0..n);
                        in_bag[i] = true;
                        i as u32
                    })
                    .collect();
                (grower.grow(idx, &mut rng), in_bag)
            })
            .collect();

        let mut forest = Forest {
            mode,
            params,
            n_features: data.n_features,
            n_classes: data.n_classes,
            seed,
            trees: Vec::with_capacity(grown.len()),
            oob_error: 0.0,
        };
        let k = data.n_classes;
        let mut votes = vec![0u32; n * k];
        let mut sums = vec![(0.0f64, 0u32); n];
        for (tree, in_bag) in &grown {
            for i in (0..n).filter(|&i| !in_bag[i]) {
                match tree.leaf(data.row(i)) {
                    Node::Leaf(c, _) => votes[i * k + *c as usize] += 1,
                    Node::Value(v) => {
                        sums[i].0 += v;
                        sums[i].1 += 1;
                    }
                    Node::Split(..) => {}
                }
            }
        }
        let (mut wrong, mut seen, mut sq) = (0usize, 0usize, 0.0);
        for i in 0..n {
            match mode {
                ForestMode::Classification => {
                    let v = &votes[i * k..(i + 1) * k];
                    if v.iter().any(|&c| c > 0) {
                        seen += 1;
                        if argmax_lowest(v) != data.labels[i] {
                            wrong += 1;
                        }
                    }
                }
                ForestMode::Regression => {
                    if sums[i].1 > 0 {
                        seen += 1;
                        let e = sums[i].0 / f64::from(sums[i].1) - data.targets[i];
                        sq += e * e;
                    }
                }
            }
        }
        forest.oob_error = match (mode, seen) {
            (_, 0) => 0.0,
            (ForestMode::Classification, s) => wrong as f64 / s as f64,
            (ForestMode::Regression, s) => sq / s as f64,
        };
        forest.trees = grown.into_iter().map(|(t, _)| t).collect();
        Ok(forest)
    }

    /// Per-class vote counts over all trees.
    pub fn votes(&self, x: &[f32]) -> Vec<u32> {
        let mut v = vec![0u32; self.n_classes];
        for t in &self.trees {
            if let Node::Leaf(c, _) = t.leaf(x) {
                v[*c as usize] += 1;
            }
        }
        v
    }

    /// Majority vote; ties go to the lower class.
    pub fn predict_class(&self, x: &[f32]) -> usize {
        match self.mode {
            ForestMode::Classification => argmax_lowest(&self.votes(x)),
            ForestMode::Regression => 0,
        }
    }

    /// Mean of the leaf class distributions.
    pub fn predict_proba(&self, x: &[f32]) -> Vec<f64> {
        let mut p = vec![0.0; self.n_classes];
        for t in &self.trees {
            if let Node::Leaf(_, dist) = t.leaf(x) {
                for (acc, d) in p.iter_mut().zip(dist) {
                    *acc += f64::from(*d);
                }
            }
        }
        let n = self.trees.len().max(1) as f64;
        p.iter_mut().for_each(|v| *v /= n);
        p
    }

    /// Mean leaf value over trees (regression mode).
    pub fn predict_value(&self, x: &[f32]) -> f64 {
        let s: f64 = self
            .trees
            .iter()
            .map(|t| match t.leaf(x) {
                Node::Value(v) => *v,
                _ => 0.0,
            })
            .sum();
        s / self.trees.len().max(1) as f64
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.trees.is_empty() {
            return Err(ModelError::CorruptModel("forest has no trees".into()));
        }
        for (i, t) in self.trees.iter().enumerate() {
            t.validate(self.n_features, self.n_classes)
                .map_err(|e| ModelError::CorruptModel(format!("tree {i}: {e}")))?;
            let kind_ok = t.nodes.iter().all(|n| {
                matches!(
                    (self.mode, n),
                    (_, Node::Split(..))
                        | (ForestMode::Classification, Node::Leaf(..))
                        | (ForestMode::Regression, Node::Value(_))
                )
            });
            if !kind_ok {
                return Err(ModelError::CorruptModel(format!("tree {i}: leaves do not match forest mode")));
            }
        }
        Ok(())
    }
}

pub(crate) fn argmax_lowest(v: &[u32]) -> usize {
    let mut best = 0;
    for (i, &c) in v.iter().enumerate().skip(1) {
        if c > v[best] {
            best = i;
        }
    }
    best
}
