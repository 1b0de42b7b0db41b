//! Point calibrators: uniform-mass histogram binning and generalized
//! isotonic regression, both in-sample calibrated for any [`LossSpec`].

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::{LossSpec, Pool, WeightedSample, QUANTILE_SLACK};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum BinningScheme {
    #[default]
    UniformMass,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BinningConfig {
    pub num_bins: usize,
    #[serde(default)]
    pub scheme: BinningScheme,
}

impl BinningConfig {
    pub fn uniform_mass(num_bins: usize) -> Self {
        Self {
            num_bins,
            scheme: BinningScheme::UniformMass,
        }
    }
}

/// Which point calibrator a Venn procedure wraps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CalibratorAlgo {
    Histogram(BinningConfig),
    Isotonic,
}

/// Bin edges plus the clamping record.
#[derive(Debug, Clone, PartialEq)]
pub struct Binning {
    pub edges: Vec<f64>,
    pub requested: usize,
}

impl Binning {
    pub fn num_bins(&self) -> usize {
        self.edges.len() + 1
    }

    pub fn clamped(&self) -> bool {
        self.num_bins() < self.requested
    }

    pub fn bin_of(&self, t: f64) -> usize {
        bin_index(&self.edges, t)
    }
}

fn bin_index(edges: &[f64], t: f64) -> usize {
    edges.partition_point(|&e| e <= t)
}

/// Edges at empirical `j/K` quantiles of `preds`, placed midway between the
/// straddling distinct order statistics. When `K` exceeds what the distinct
/// values support, fewer bins are returned (see [`Binning::clamped`]).
pub fn uniform_mass_bins(preds: &[f64], config: &BinningConfig) -> Result<Binning> {
    if preds.is_empty() {
        return Err(Error::domain("cannot bin an empty prediction vector"));
    }
    if config.num_bins == 0 {
        return Err(Error::invalid("number of bins must be positive"));
    }
    if preds.iter().any(|p| !p.is_finite()) {
        return Err(Error::invalid("non-finite prediction"));
    }
    let mut sorted = preds.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(Binning {
        edges: edges_from_sorted(&sorted, config.num_bins),
        requested: config.num_bins,
    })
}

fn edges_from_sorted(sorted: &[f64], k: usize) -> Vec<f64> {
    let n = sorted.len();
    // distinct values with cumulative counts
    let mut distinct: Vec<(f64, usize)> = Vec::new();
    for (i, &v) in sorted.iter().enumerate() {
        match distinct.last_mut() {
            Some(last) if last.0 == v => last.1 = i + 1,
            _ => distinct.push((v, i + 1)),
        }
    }
    let mut edges: Vec<f64> = Vec::with_capacity(k.saturating_sub(1));
    for j in 1..k {
        let target = j * n / k;
        if target == 0 {
            continue;
        }
        let d = distinct.partition_point(|&(_, cum)| cum < target);
        if d + 1 >= distinct.len() {
            continue;
        }
        let (a, b) = (distinct[d].0, distinct[d + 1].0);
        let mut edge = 0.5 * (a + b);
        if edge <= a {
            edge = b;
        }
        if edges.last().is_none_or(|&last| edge > last) {
            edges.push(edge);
        }
    }
    edges
}

/// Piecewise-constant, right-continuous map from raw prediction to
/// calibrated value: `values[j]` on `[breakpoints[j-1], breakpoints[j])`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepCalibrator {
    pub breakpoints: Vec<f64>,
    pub values: Vec<f64>,
    pub monotone: bool,
    #[serde(skip)]
    pub fit_keys: Vec<f64>,
}

impl StepCalibrator {
    pub fn eval(&self, t: f64) -> f64 {
        self.values[bin_index(&self.breakpoints, t)]
    }

    pub fn eval_all(&self, ts: &[f64]) -> Vec<f64> {
        ts.iter().map(|&t| self.eval(t)).collect()
    }

    pub fn num_levels(&self) -> usize {
        self.values.len()
    }

    /// Checks the structural invariants.
    pub fn validate(&self) -> Result<()> {
        if self.values.is_empty() || self.values.len() != self.breakpoints.len() + 1 {
            return Err(Error::invalid(
                "step calibrator needs K values and K-1 breakpoints",
            ));
        }
        if self.breakpoints.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("breakpoints must be strictly increasing"));
        }
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite calibrated value"));
        }
        if self.monotone && self.values.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::invalid("monotone calibrator with decreasing values"));
        }
        Ok(())
    }
}

fn canonical(samples: &[WeightedSample]) -> Result<Vec<WeightedSample>> {
    if samples.is_empty() {
        return Err(Error::domain("no calibration samples"));
    }
    for s in samples {
        s.validate()?;
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(WeightedSample::canonical_cmp);
    Ok(sorted)
}

fn distinct_keys(sorted: &[WeightedSample]) -> Vec<f64> {
    let mut keys: Vec<f64> = sorted.iter().map(|s| s.key).collect();
    keys.dedup();
    keys
}

/// Histogram regression: each bin takes the pooled loss minimizer of the
/// samples whose key falls in it.
pub fn histogram_calibrate(
    loss: &LossSpec,
    samples: &[WeightedSample],
    edges: &[f64],
) -> Result<StepCalibrator> {
    let sorted = canonical(samples)?;
    if edges.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::invalid("bin edges must be strictly increasing"));
    }
    let mut bins: Vec<Vec<WeightedSample>> = vec![Vec::new(); edges.len() + 1];
    for s in &sorted {
        bins[bin_index(edges, s.key)].push(*s);
    }
    let values = bins
        .iter()
        .enumerate()
        .map(|(j, b)| {
            if b.is_empty() {
                Err(Error::EmptyBin { bin: j })
            } else {
                loss.pool_minimizer(b)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(StepCalibrator {
        breakpoints: edges.to_vec(),
        values,
        monotone: false,
        fit_keys: distinct_keys(&sorted),
    })
}

/// Uniform-mass binning on the sample keys followed by histogram regression.
pub fn fit_histogram(
    loss: &LossSpec,
    samples: &[WeightedSample],
    config: &BinningConfig,
) -> Result<(StepCalibrator, Binning)> {
    let keys: Vec<f64> = samples.iter().map(|s| s.key).collect();
    let binning = uniform_mass_bins(&keys, config)?;
    let cal = histogram_calibrate(loss, samples, &binning.edges)?;
    Ok((cal, binning))
}

#[derive(Debug, Clone)]
pub(crate) struct Block {
    pub first_key: f64,
    pub pool: Pool,
    pub value: f64,
}

/// Samples grouped by equal key, in key order.
pub(crate) fn key_units(loss: &LossSpec, sorted: &[WeightedSample]) -> Vec<(f64, Pool)> {
    let mut units: Vec<(f64, Pool)> = Vec::new();
    for s in sorted {
        match units.last_mut() {
            Some((k, pool)) if *k == s.key => pool.push(s.target, s.weight),
            _ => {
                let mut pool = Pool::empty(loss);
                pool.push(s.target, s.weight);
                units.push((s.key, pool));
            }
        }
    }
    units
}

/// Stack-based pool-adjacent-violators over key-ordered units. Adjacent
/// blocks are merged while the left value is >= the right value, so the
/// returned block values are strictly increasing.
pub(crate) fn pava<I: IntoIterator<Item = (f64, Pool)>>(units: I) -> Vec<Block> {
    let mut stack: Vec<Block> = Vec::new();
    for (key, pool) in units {
        let value = pool.value();
        stack.push(Block {
            first_key: key,
            pool,
            value,
        });
        while stack.len() >= 2 && stack[stack.len() - 2].value >= stack[stack.len() - 1].value {
            let top = stack.pop().expect("len >= 2");
            let prev = stack.last_mut().expect("len >= 1");
            prev.pool.merge(&top.pool);
            prev.value = prev.pool.value();
        }
    }
    stack
}

/// Generalized isotonic regression: the nondecreasing step function
/// minimizing the weighted empirical loss, with jumps only at observed keys.
pub fn isotonic_calibrate(loss: &LossSpec, samples: &[WeightedSample]) -> Result<StepCalibrator> {
    let sorted = canonical(samples)?;
    let blocks = pava(key_units(loss, &sorted));
    Ok(StepCalibrator {
        breakpoints: blocks[1..].iter().map(|b| b.first_key).collect(),
        values: blocks.iter().map(|b| b.value).collect(),
        monotone: true,
        fit_keys: distinct_keys(&sorted),
    })
}

pub fn fit_calibrator(
    algo: &CalibratorAlgo,
    loss: &LossSpec,
    samples: &[WeightedSample],
) -> Result<StepCalibrator> {
    match algo {
        CalibratorAlgo::Isotonic => isotonic_calibrate(loss, samples),
        CalibratorAlgo::Histogram(cfg) => fit_histogram(loss, samples, cfg).map(|(c, _)| c),
    }
}

/// Evaluates the isotonic fit at `x` on the samples augmented by one extra
/// point at key `x`, for many candidate targets, without refitting.
///
/// The PAVA stack of every prefix and every suffix of the units is stored
/// persistently in an [`IsotonicIndex`], built once per calibration set. A
/// query only merges the blocks adjacent to the inserted unit.
#[derive(Debug, Clone)]
pub(crate) struct IsotonicInsertion {
    index: Arc<IsotonicIndex>,
    lo: usize,
    hi: usize,
    center: Option<Pool>,
}

impl IsotonicInsertion {
    /// `sorted` must be in canonical order.
    #[cfg(test)]
    pub fn new(loss: &LossSpec, sorted: &[WeightedSample], x: f64) -> Self {
        Arc::new(IsotonicIndex::new(loss, &key_units(loss, sorted))).insertion(x)
    }

    pub fn value_with(&self, target: f64, weight: f64) -> f64 {
        let ix = &*self.index;
        let (mut li, mut ri) = (ix.left_head[self.lo], ix.right_head[self.hi]);
        match (&self.center, &ix.ranks) {
            (Some(center), _) => {
                let mut cur = center.clone();
                cur.push(target, weight);
                let mut v = cur.value();
                loop {
                    if let Some(l) = li.filter(|&l| ix.left[l].value >= v) {
                        cur.merge(ix.left[l].mean.as_ref().expect("mean stack"));
                        li = ix.left[l].link;
                    } else if let Some(r) = ri.filter(|&r| ix.right[r].value <= v) {
                        cur.merge(ix.right[r].mean.as_ref().expect("mean stack"));
                        ri = ix.right[r].link;
                    } else {
                        return v;
                    }
                    v = cur.value();
                }
            }
            (None, Some(rq)) => {
                let (mut a, mut b) = (self.lo, self.hi);
                let mut v = rq.span_quantile(a, b, Some((target, weight)));
                loop {
                    if let Some(l) = li.filter(|&l| ix.left[l].value >= v) {
                        a = ix.left[l].a;
                        li = ix.left[l].link;
                    } else if let Some(r) = ri.filter(|&r| ix.right[r].value <= v) {
                        b = ix.right[r].b;
                        ri = ix.right[r].link;
                    } else {
                        return v;
                    }
                    v = rq.span_quantile(a, b, Some((target, weight)));
                }
            }
            (None, None) => unreachable!("index without statistics"),
        }
    }
}

#[derive(Debug, Clone)]
struct StackNode {
    /// Units `a..b` pooled into this block.
    a: usize,
    b: usize,
    value: f64,
    /// Next block away from the growing end of the stack.
    link: Option<usize>,
    mean: Option<Pool>,
}

/// Persistent prefix and suffix PAVA stacks over key-ordered units.
///
/// `left_head[p]` is the top block of the stack for units `..p` and
/// `right_head[s]` the top block for units `s..`; both share structure, so
/// the index takes O(n) blocks plus an O(n log n) rank tree for quantiles.
#[derive(Debug)]
pub(crate) struct IsotonicIndex {
    keys: Vec<f64>,
    units: Vec<Pool>,
    empty: Pool,
    left: Vec<StackNode>,
    left_head: Vec<Option<usize>>,
    right: Vec<StackNode>,
    right_head: Vec<Option<usize>>,
    ranks: Option<RangeQuantile>,
}

impl IsotonicIndex {
    pub fn new(loss: &LossSpec, units: &[(f64, Pool)]) -> Self {
        let ranks = loss
            .alpha()
            .map(|alpha| RangeQuantile::new(1.0 - alpha, units));
        let mean = ranks.is_none();
        let node = |u: usize, link| StackNode {
            a: u,
            b: u + 1,
            value: units[u].1.value(),
            link,
            mean: mean.then(|| units[u].1.clone()),
        };
        let pooled = |a: usize, b: usize, link, first: &Option<Pool>, second: &Option<Pool>| {
            let merged = first.clone().map(|mut p| {
                p.merge(second.as_ref().expect("mean stack"));
                p
            });
            let value = match (&merged, &ranks) {
                (Some(p), _) => p.value(),
                (None, Some(rq)) => rq.span_quantile(a, b, None),
                (None, None) => unreachable!(),
            };
            StackNode {
                a,
                b,
                value,
                link,
                mean: merged,
            }
        };

        let n = units.len();
        let mut left: Vec<StackNode> = Vec::with_capacity(n);
        let mut left_head = vec![None];
        for u in 0..n {
            let mut top = node(u, *left_head.last().expect("nonempty"));
            while let Some(p) = top.link.filter(|&p| left[p].value >= top.value) {
                let prev = &left[p];
                top = pooled(prev.a, top.b, prev.link, &prev.mean, &top.mean);
            }
            left.push(top);
            left_head.push(Some(left.len() - 1));
        }

        let mut right: Vec<StackNode> = Vec::with_capacity(n);
        let mut right_head = vec![None; n + 1];
        for s in (0..n).rev() {
            let mut top = node(s, right_head[s + 1]);
            while let Some(p) = top.link.filter(|&p| top.value >= right[p].value) {
                let next = &right[p];
                top = pooled(top.a, next.b, next.link, &next.mean, &top.mean);
            }
            right.push(top);
            right_head[s] = Some(right.len() - 1);
        }

        Self {
            keys: units.iter().map(|(k, _)| *k).collect(),
            units: if mean {
                units.iter().map(|(_, p)| p.clone()).collect()
            } else {
                Vec::new()
            },
            empty: Pool::empty(loss),
            left,
            left_head,
            right,
            right_head,
            ranks,
        }
    }

    pub fn insertion(self: &Arc<Self>, x: f64) -> IsotonicInsertion {
        let lo = self.keys.partition_point(|&k| k < x);
        let hi = self.keys.partition_point(|&k| k <= x);
        let center = self.ranks.is_none().then(|| {
            let mut c = self.empty.clone();
            for p in &self.units[lo..hi] {
                c.merge(p);
            }
            c
        });
        IsotonicInsertion {
            index: Arc::clone(self),
            lo,
            hi,
            center,
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct RankNode {
    left: u32,
    right: u32,
    weight: f64,
}

/// Persistent weighted rank tree over all targets, inserted in unit order.
/// Version `i` holds the first `i` targets, so the weighted left quantile of
/// any run of units (plus one extra point) costs O(log n).
#[derive(Debug)]
struct RangeQuantile {
    level: f64,
    /// Targets in rank order.
    values: Vec<f64>,
    nodes: Vec<RankNode>,
    /// Root per version; `roots[unit_start[u]]` precedes unit `u`.
    roots: Vec<u32>,
    unit_start: Vec<usize>,
}

impl RangeQuantile {
    fn new(level: f64, units: &[(f64, Pool)]) -> Self {
        let mut items: Vec<(f64, f64)> = Vec::new();
        let mut unit_start = vec![0];
        for (_, pool) in units {
            if let Pool::Quantile { items: it, .. } = pool {
                items.extend_from_slice(it);
            }
            unit_start.push(items.len());
        }
        let mut order: Vec<usize> = (0..items.len()).collect();
        order.sort_by(|&i, &j| items[i].0.total_cmp(&items[j].0).then(i.cmp(&j)));
        let mut rank = vec![0; items.len()];
        for (r, &i) in order.iter().enumerate() {
            rank[i] = r;
        }
        let mut rq = Self {
            level,
            values: order.iter().map(|&i| items[i].0).collect(),
            nodes: vec![RankNode::default()],
            roots: vec![0],
            unit_start,
        };
        for (i, &(_, w)) in items.iter().enumerate() {
            let root = rq.insert(*rq.roots.last().expect("nonempty"), rank[i], w);
            rq.roots.push(root);
        }
        rq
    }

    fn insert(&mut self, root: u32, rank: usize, w: f64) -> u32 {
        let (mut lo, mut hi) = (0, self.values.len());
        let mut old = root as usize;
        let mut cur = self.nodes.len();
        let new_root = cur as u32;
        self.nodes.push(RankNode {
            weight: self.nodes[old].weight + w,
            ..self.nodes[old]
        });
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            let go_left = rank < mid;
            old = if go_left {
                self.nodes[old].left
            } else {
                self.nodes[old].right
            } as usize;
            let next = self.nodes.len();
            self.nodes.push(RankNode {
                weight: self.nodes[old].weight + w,
                ..self.nodes[old]
            });
            if go_left {
                self.nodes[cur].left = next as u32;
                hi = mid;
            } else {
                self.nodes[cur].right = next as u32;
                lo = mid;
            }
            cur = next;
        }
        new_root
    }

    fn weight(&self, x: u32, y: u32) -> f64 {
        self.nodes[y as usize].weight - self.nodes[x as usize].weight
    }

    /// Weight of ranks `..end` between versions `x` and `y`.
    fn weight_below(&self, mut x: u32, mut y: u32, end: usize) -> f64 {
        let (mut lo, mut hi) = (0, self.values.len());
        let mut acc = 0.0;
        while end > lo {
            if end >= hi {
                return acc + self.weight(x, y);
            }
            let mid = (lo + hi) / 2;
            let (xn, yn) = (self.nodes[x as usize], self.nodes[y as usize]);
            if end <= mid {
                (x, y, hi) = (xn.left, yn.left, mid);
            } else {
                acc += self.weight(xn.left, yn.left);
                (x, y, lo) = (xn.right, yn.right, mid);
            }
        }
        acc
    }

    /// Smallest rank whose cumulative weight between versions reaches `goal`.
    fn first_reaching(&self, mut x: u32, mut y: u32, mut goal: f64) -> Option<usize> {
        if self.weight(x, y) <= 0.0 || self.weight(x, y) < goal {
            return None;
        }
        let (mut lo, mut hi) = (0, self.values.len());
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            let (xn, yn) = (self.nodes[x as usize], self.nodes[y as usize]);
            let wl = self.weight(xn.left, yn.left);
            if wl > 0.0 && wl >= goal {
                (x, y, hi) = (xn.left, yn.left, mid);
            } else {
                goal -= wl;
                (x, y, lo) = (xn.right, yn.right, mid);
            }
        }
        Some(lo)
    }

    /// Left quantile of the targets of units `a..b`, plus an optional
    /// `(target, weight)` point.
    fn span_quantile(&self, a: usize, b: usize, extra: Option<(f64, f64)>) -> f64 {
        let (x, y) = (
            self.roots[self.unit_start[a]],
            self.roots[self.unit_start[b]],
        );
        let (t, w) = extra.unwrap_or((f64::NAN, 0.0));
        let total = self.weight(x, y) + w;
        let goal = self.level * total - QUANTILE_SLACK * total;
        let at = |r: Option<usize>| r.map(|r| self.values[r]);
        if extra.is_none() {
            return at(self.first_reaching(x, y, goal)).unwrap_or(f64::NAN);
        }
        let below = self.values.partition_point(|&v| v <= t);
        if self.weight_below(x, y, below) + w >= goal {
            at(self.first_reaching(x, y, goal)).map_or(t, |v| v.min(t))
        } else {
            at(self.first_reaching(x, y, goal - w)).unwrap_or(t)
        }
    }
}

/// Same idea for histogram binning: bins are recomputed on the augmented
/// keys (they do not depend on targets), so the bin holding `x` is fixed and
/// each query only adds one point to its pool.
#[derive(Debug, Clone)]
pub(crate) struct HistogramInsertion {
    pool: Pool,
}

impl HistogramInsertion {
    pub fn new(
        loss: &LossSpec,
        sorted: &[WeightedSample],
        x: f64,
        config: &BinningConfig,
    ) -> Result<Self> {
        let mut keys: Vec<f64> = sorted.iter().map(|s| s.key).collect();
        let pos = keys.partition_point(|&k| k.total_cmp(&x).is_le());
        keys.insert(pos, x);
        let edges = edges_from_sorted(&keys, config.num_bins.max(1));
        let bin = bin_index(&edges, x);
        let pool = Pool::from_samples(
            loss,
            sorted.iter().filter(|s| bin_index(&edges, s.key) == bin),
        );
        Ok(Self { pool })
    }

    pub fn value_with(&self, target: f64, weight: f64) -> f64 {
        let mut p = self.pool.clone();
        p.push(target, weight);
        p.value()
    }
}

/// Per-level-set first-order check on the fitted samples.
#[derive(Debug, Clone, Serialize)]
pub struct LevelCheck {
    pub value: f64,
    pub count: usize,
    pub derivative_sum: f64,
    pub lower: f64,
    pub upper: f64,
    pub passes: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct InSampleReport {
    pub levels: Vec<LevelCheck>,
}

impl InSampleReport {
    pub fn passes(&self) -> bool {
        self.levels.iter().all(|l| l.passes)
    }

    pub fn max_abs_derivative_sum(&self) -> f64 {
        self.levels
            .iter()
            .map(|l| l.derivative_sum.abs())
            .fold(0.0, f64::max)
    }
}

/// Tolerance on `|D(v)|` for squared error.
pub const SQUARED_ERROR_TOL: f64 = 1e-8;

/// For each distinct calibrated value `v`, sums the loss derivative (and its
/// subgradient interval) over the samples mapped to `v`.
pub fn check_in_sample_calibration(
    loss: &LossSpec,
    calibrator: &StepCalibrator,
    samples: &[WeightedSample],
) -> Result<InSampleReport> {
    let groups = level_groups(calibrator, samples);
    let mut levels = Vec::with_capacity(groups.len());
    for (v, members) in groups {
        let (mut d, mut lo, mut hi, mut w) = (0.0, 0.0, 0.0, 0.0);
        for s in &members {
            d += s.weight * loss.derivative(v, s.target)?;
            let (a, b) = loss.subgradient(v, s.target)?;
            lo += s.weight * a;
            hi += s.weight * b;
            w += s.weight;
        }
        let passes = if loss.is_squared_error() {
            d.abs() <= SQUARED_ERROR_TOL
        } else {
            let tol = 1e-9 * w.max(1.0);
            lo <= tol && hi >= -tol
        };
        levels.push(LevelCheck {
            value: v,
            count: members.len(),
            derivative_sum: d,
            lower: lo,
            upper: hi,
            passes,
        });
    }
    Ok(InSampleReport { levels })
}

fn level_groups(
    calibrator: &StepCalibrator,
    samples: &[WeightedSample],
) -> Vec<(f64, Vec<WeightedSample>)> {
    let mut tagged: Vec<(f64, WeightedSample)> = samples
        .iter()
        .map(|s| (calibrator.eval(s.key), *s))
        .collect();
    tagged.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.canonical_cmp(&b.1)));
    let mut groups: Vec<(f64, Vec<WeightedSample>)> = Vec::new();
    for (v, s) in tagged {
        match groups.last_mut() {
            Some((gv, members)) if *gv == v => members.push(s),
            _ => groups.push((v, vec![s])),
        }
    }
    groups
}

/// Per-sample derivative selection that makes every level set's weighted
/// sum vanish. Off the pinball kink this is the ordinary derivative; samples
/// sitting exactly on their level's value share the balancing subgradient,
/// clamped to the subdifferential.
pub fn balanced_derivatives(
    loss: &LossSpec,
    calibrator: &StepCalibrator,
    samples: &[WeightedSample],
) -> Result<Vec<f64>> {
    let values: Vec<f64> = samples.iter().map(|s| calibrator.eval(s.key)).collect();
    let mut out = vec![0.0; samples.len()];
    let Some(alpha) = loss.alpha() else {
        for (i, s) in samples.iter().enumerate() {
            out[i] = loss.derivative(values[i], s.target)?;
        }
        return Ok(out);
    };
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut start = 0;
    while start < order.len() {
        let v = values[order[start]];
        let end = start + order[start..].partition_point(|&i| values[i] == v);
        let (mut fixed, mut tied_w) = (0.0, 0.0);
        for &i in &order[start..end] {
            let s = &samples[i];
            if s.target == v {
                tied_w += s.weight;
            } else {
                fixed += s.weight * loss.derivative(v, s.target)?;
            }
        }
        let share = if tied_w > 0.0 {
            (-fixed / tied_w).clamp(alpha - 1.0, alpha)
        } else {
            0.0
        };
        for &i in &order[start..end] {
            let s = &samples[i];
            out[i] = if s.target == v {
                share
            } else {
                loss.derivative(v, s.target)?
            };
        }
        start = end;
    }
    Ok(out)
}
