//! Training objectives: in-batch retrieval losses for both towers, the
//! kernel-based neighbour distributions, the four KL alignment terms of the
//! Geometry Alignment Mechanism (GAM) and the weighted joint objective.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{EndxError, Result};
use crate::tensor::{Real, Tensor};

/// `e_iᵀ e_j`.
pub fn inner_kernel(ei: &[f64], ej: &[f64]) -> f64 {
    debug_assert_eq!(ei.len(), ej.len());
    ei.iter().zip(ej).map(|(a, b)| a * b).sum()
}

/// `exp(-‖e_i − e_j‖² / width)`. Neighbour distributions pass `width = 2σ²`.
pub fn gaussian_kernel(ei: &[f64], ej: &[f64], width: f64) -> Result<f64> {
    if !(width > 0.0) {
        return Err(EndxError::Config(format!("gaussian width must be positive, got {width}")));
    }
    let d2: f64 = ei.iter().zip(ej).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok((-d2 / width).exp())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kernel {
    Inner,
    Gaussian,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    /// `p(a_j | q_i)`
    #[serde(rename = "a|q")]
    AGivenQ,
    /// `p(q_j | a_i)`
    #[serde(rename = "q|a")]
    QGivenA,
    /// `p(q_j | q_i)`
    #[serde(rename = "q|q")]
    QGivenQ,
    /// `p(a_j | a_i)`
    #[serde(rename = "a|a")]
    AGivenA,
}

impl Direction {
    pub const ALL: [Direction; 4] = [Direction::QGivenQ, Direction::AGivenA, Direction::QGivenA, Direction::AGivenQ];

    pub fn same_type(self) -> bool {
        matches!(self, Direction::QGivenQ | Direction::AGivenA)
    }

    pub fn label(self) -> &'static str {
        match self {
            Direction::AGivenQ => "a|q",
            Direction::QGivenA => "q|a",
            Direction::QGivenQ => "q|q",
            Direction::AGivenA => "a|a",
        }
    }

    /// `(conditioning rows, neighbour columns)` drawn from `(q, a)`.
    fn operands<T: Copy>(self, q: T, a: T) -> (T, T) {
        match self {
            Direction::AGivenQ => (q, a),
            Direction::QGivenA => (a, q),
            Direction::QGivenQ => (q, q),
            Direction::AGivenA => (a, a),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    Dual,
    Cross,
}

/// Aligned question/answer embeddings of one mini-batch: row `i` of `q`
/// matches row `i` of `a`.
#[derive(Clone, Debug)]
pub struct EmbeddingBatch<F> {
    pub q: Tensor<F>,
    pub a: Tensor<F>,
    pub origin: Origin,
}

impl<F: Real> EmbeddingBatch<F> {
    pub fn new(q: Tensor<F>, a: Tensor<F>, origin: Origin) -> Result<Self> {
        if q.rank() != 2 || q.shape() != a.shape() {
            return Err(EndxError::Shape(format!("question batch {:?} vs answer batch {:?}", q.shape(), a.shape())));
        }
        if q.rows() < 2 {
            return Err(EndxError::Invalid("a batch needs at least 2 pairs for in-batch negatives".into()));
        }
        Ok(Self { q, a, origin })
    }

    pub fn size(&self) -> usize {
        self.q.rows()
    }
}

/// Row-stochastic `B x B` neighbour probabilities.
#[derive(Clone, Debug)]
pub struct ConditionalDistribution<F> {
    pub probs: Tensor<F>,
    pub direction: Direction,
    pub exclude_diagonal: bool,
}

/// Values per GAM term.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TermValues<T> {
    #[serde(rename = "a|q")]
    pub aq: T,
    #[serde(rename = "q|a")]
    pub qa: T,
    #[serde(rename = "q|q")]
    pub qq: T,
    #[serde(rename = "a|a")]
    pub aa: T,
}

impl<T: Copy> TermValues<T> {
    pub fn uniform(v: T) -> Self {
        Self { aq: v, qa: v, qq: v, aa: v }
    }

    pub fn get(&self, d: Direction) -> T {
        match d {
            Direction::AGivenQ => self.aq,
            Direction::QGivenA => self.qa,
            Direction::QGivenQ => self.qq,
            Direction::AGivenA => self.aa,
        }
    }

    pub fn set(&mut self, d: Direction, v: T) {
        match d {
            Direction::AGivenQ => self.aq = v,
            Direction::QGivenA => self.qa = v,
            Direction::QGivenQ => self.qq = v,
            Direction::AGivenA => self.aa = v,
        }
    }

    pub fn map<U: Copy>(&self, f: impl Fn(Direction, T) -> U) -> TermValues<U> {
        TermValues {
            aq: f(Direction::AGivenQ, self.aq),
            qa: f(Direction::QGivenA, self.qa),
            qq: f(Direction::QGivenQ, self.qq),
            aa: f(Direction::AGivenA, self.aa),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GaussianWidths {
    /// σ² per direction for cross-embeddings.
    pub cross: TermValues<f64>,
    /// σ² per direction for dual-embeddings.
    pub dual: TermValues<f64>,
}

impl Default for GaussianWidths {
    fn default() -> Self {
        Self { cross: TermValues::uniform(1.0), dual: TermValues::uniform(1.0) }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GamConfig {
    pub kernel: Kernel,
    /// Only read by the Gaussian kernel.
    pub widths: GaussianWidths,
    /// Term weights reached at the end of warmup.
    pub weights: TermValues<f64>,
    pub warmup_epochs: u32,
    /// Terms switched off for ablations are neither computed nor logged.
    pub enabled: TermValues<bool>,
    /// Leave `i = j` out of q|q and a|a.
    pub exclude_same_type_diagonal: bool,
}

impl Default for GamConfig {
    fn default() -> Self {
        Self {
            kernel: Kernel::Inner,
            widths: GaussianWidths::default(),
            weights: TermValues { aq: 0.5, qa: 0.5, qq: 1e4, aa: 1e4 },
            warmup_epochs: 5,
            enabled: TermValues::uniform(true),
            exclude_same_type_diagonal: true,
        }
    }
}

impl GamConfig {
    pub fn validate(&self) -> Result<()> {
        for d in Direction::ALL {
            if !(self.weights.get(d) >= 0.0) {
                return Err(EndxError::Config(format!("GAM weight for {} must be non-negative", d.label())));
            }
            if self.kernel == Kernel::Gaussian && !(self.widths.cross.get(d) > 0.0 && self.widths.dual.get(d) > 0.0) {
                return Err(EndxError::Config(format!("gaussian width for {} must be positive", d.label())));
            }
        }
        if self.warmup_epochs == 0 {
            return Err(EndxError::Config("warmup_epochs must be at least 1".into()));
        }
        Ok(())
    }

    /// Term weights in effect during `epoch` (zero-based).
    pub fn scheduled_weights(&self, epoch: u32) -> TermValues<f64> {
        self.weights.map(|_, target| warmup_weight(epoch, self.warmup_epochs, target))
    }

    fn exclude_diagonal(&self, d: Direction) -> bool {
        d.same_type() && self.exclude_same_type_diagonal
    }
}

/// `min(epoch / warmup_epochs, 1) · target`.
pub fn warmup_weight(epoch: u32, warmup_epochs: u32, target: f64) -> f64 {
    let w = warmup_epochs.max(1);
    if epoch >= w {
        target
    } else {
        target * epoch as f64 / w as f64
    }
}

/// `α_dual`, `α_cross`, `α_ga` of the joint objective.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub dual: f64,
    pub cross: f64,
    pub ga: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { dual: 0.25, cross: 0.25, ga: 0.5 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.dual >= 0.0 && self.cross >= 0.0 && self.ga >= 0.0) {
            return Err(EndxError::Config("loss weights must be non-negative".into()));
        }
        Ok(())
    }

    /// Neither the cross loss nor alignment contributes: plain Dual-Encoders.
    pub fn dual_only(&self) -> bool {
        self.cross == 0.0 && self.ga == 0.0
    }
}

// ---------------------------------------------------------------------------
// Graph builders

/// In-batch softmax retrieval loss over the score matrix `Q·Aᵀ`.
pub fn retrieval_loss<F: Real>(g: &mut Graph<F>, q: Var, a: Var) -> Var {
    let scores = g.matmul_t(q, a, false, true);
    g.diag_cross_entropy(scores)
}

/// Neighbour distribution of `rows` over `cols` on the tape.
pub fn neighbour_probs<F: Real>(
    g: &mut Graph<F>,
    rows: Var,
    cols: Var,
    kernel: Kernel,
    width: f64,
    exclude_diagonal: bool,
) -> Var {
    let logits = match kernel {
        Kernel::Inner => g.matmul_t(rows, cols, false, true),
        Kernel::Gaussian => {
            let d2 = g.sq_dist(rows, cols);
            let scaled = g.scale(d2, F::lit(-1.0 / width));
            g.exp(scaled)
        }
    };
    if exclude_diagonal {
        let b = g.value(logits).rows();
        let m = g.value(logits).cols();
        let mask: Vec<bool> = (0..b * m).map(|k| k / m != k % m).collect();
        g.softmax(logits, Some(&mask))
    } else {
        g.softmax(logits, None)
    }
}

/// Nodes of the four alignment terms; disabled terms are `None`.
#[derive(Clone, Debug)]
pub struct GamTerms {
    pub total: Var,
    pub terms: TermValues<Option<Var>>,
}

/// `Σ α_d · KL(p_cross,d ‖ p_dual,d)` over enabled directions. The cross
/// embeddings are detached: alignment never sends gradient to the teacher.
pub fn gam_terms<F: Real>(
    g: &mut Graph<F>,
    dual: (Var, Var),
    cross: (Var, Var),
    cfg: &GamConfig,
    weights: &TermValues<f64>,
) -> GamTerms {
    let cq = g.detach(cross.0);
    let ca = g.detach(cross.1);
    let mut terms = TermValues::uniform(None);
    let mut total = g.constant(Tensor::scalar(F::zero()));
    for d in Direction::ALL {
        if !cfg.enabled.get(d) {
            continue;
        }
        let excl = cfg.exclude_diagonal(d);
        let (cr, cc) = d.operands(cq, ca);
        let (dr, dc) = d.operands(dual.0, dual.1);
        let wc = 2.0 * cfg.widths.cross.get(d);
        let wd = 2.0 * cfg.widths.dual.get(d);
        let p_cross = neighbour_probs(g, cr, cc, cfg.kernel, wc, excl);
        let p_dual = neighbour_probs(g, dr, dc, cfg.kernel, wd, excl);
        let kl = g.kl_div(p_cross, p_dual);
        terms.set(d, Some(kl));
        let weighted = g.scale(kl, F::lit(weights.get(d)));
        total = g.add(total, weighted);
    }
    GamTerms { total, terms }
}

// ---------------------------------------------------------------------------
// Plain-value entry points

fn check_origin<F>(batch: &EmbeddingBatch<F>, want: Origin) -> Result<()> {
    if batch.origin != want {
        return Err(EndxError::Invalid(format!("expected {want:?} embeddings, got {:?}", batch.origin)));
    }
    Ok(())
}

fn retrieval_value<F: Real>(batch: &EmbeddingBatch<F>) -> Result<F> {
    if batch.size() < 2 {
        return Err(EndxError::Invalid("a batch needs at least 2 pairs".into()));
    }
    let mut g = Graph::new();
    let q = g.constant(batch.q.clone());
    let a = g.constant(batch.a.clone());
    let l = retrieval_loss(&mut g, q, a);
    g.check()?;
    Ok(g.value(l).data()[0])
}

/// Dual-Encoders retrieval loss with in-batch negatives.
pub fn dual_loss<F: Real>(batch: &EmbeddingBatch<F>) -> Result<F> {
    check_origin(batch, Origin::Dual)?;
    retrieval_value(batch)
}

/// Cross-Encoders retrieval loss; same form as [`dual_loss`].
pub fn cross_loss<F: Real>(batch: &EmbeddingBatch<F>) -> Result<F> {
    check_origin(batch, Origin::Cross)?;
    retrieval_value(batch)
}

/// Same retrieval loss evaluated directly on a `B x B` score matrix.
pub fn retrieval_loss_from_scores<F: Real>(scores: &Tensor<F>) -> Result<F> {
    if scores.rank() != 2 || scores.rows() != scores.cols() || scores.rows() < 2 {
        return Err(EndxError::Shape(format!("score matrix must be square with B >= 2, got {:?}", scores.shape())));
    }
    let mut g = Graph::new();
    let s = g.constant(scores.clone());
    let l = g.diag_cross_entropy(s);
    g.check()?;
    Ok(g.value(l).data()[0])
}

/// Neighbour distribution for `direction` with rows conditioning on cols.
pub fn conditional_distribution<F: Real>(
    rows: &Tensor<F>,
    cols: &Tensor<F>,
    kernel: Kernel,
    width: f64,
    direction: Direction,
    exclude_diagonal: bool,
) -> Result<ConditionalDistribution<F>> {
    if rows.rank() != 2 || rows.shape() != cols.shape() {
        return Err(EndxError::Shape(format!("{:?} vs {:?}", rows.shape(), cols.shape())));
    }
    if rows.rows() < 2 {
        return Err(EndxError::Invalid("conditional distributions need B >= 2".into()));
    }
    if kernel == Kernel::Gaussian && !(width > 0.0) {
        return Err(EndxError::Config("gaussian width must be positive".into()));
    }
    let exclude = exclude_diagonal && direction.same_type();
    let mut g = Graph::new();
    let r = g.constant(rows.clone());
    let c = g.constant(cols.clone());
    let p = neighbour_probs(&mut g, r, c, kernel, width, exclude);
    g.check()?;
    Ok(ConditionalDistribution { probs: g.value(p).clone(), direction, exclude_diagonal: exclude })
}

/// Mean-over-rows `KL(p_cross ‖ p_dual)`, teacher first.
pub fn kl_alignment<F: Real>(p_cross: &ConditionalDistribution<F>, p_dual: &ConditionalDistribution<F>) -> Result<F> {
    if p_cross.direction != p_dual.direction
        || p_cross.exclude_diagonal != p_dual.exclude_diagonal
        || p_cross.probs.shape() != p_dual.probs.shape()
    {
        return Err(EndxError::Invalid("distributions differ in direction, diagonal convention or shape".into()));
    }
    let mut g = Graph::new();
    let t = g.constant(p_cross.probs.clone());
    let s = g.constant(p_dual.probs.clone());
    let kl = g.kl_div(t, s);
    g.check()?;
    Ok(g.value(kl).data()[0])
}

/// GAM loss and its per-direction components (disabled terms are `None`).
pub fn gam_loss<F: Real>(
    dual: &EmbeddingBatch<F>,
    cross: &EmbeddingBatch<F>,
    cfg: &GamConfig,
) -> Result<(F, TermValues<Option<F>>)> {
    check_origin(dual, Origin::Dual)?;
    check_origin(cross, Origin::Cross)?;
    if dual.q.shape() != cross.q.shape() {
        return Err(EndxError::Shape("dual and cross batches are not aligned".into()));
    }
    let mut g = Graph::new();
    let dq = g.constant(dual.q.clone());
    let da = g.constant(dual.a.clone());
    let cq = g.constant(cross.q.clone());
    let ca = g.constant(cross.a.clone());
    let out = gam_terms(&mut g, (dq, da), (cq, ca), cfg, &cfg.weights);
    g.check()?;
    let comps = out.terms.map(|_, v| v.map(|v| g.value(v).data()[0]));
    Ok((g.value(out.total).data()[0], comps))
}

/// `α_dual·L_dual + α_cross·L_cross + α_ga·L_ga`.
pub fn total_loss<F: Real>(
    dual: &EmbeddingBatch<F>,
    cross: &EmbeddingBatch<F>,
    weights: &LossWeights,
    gam: &GamConfig,
) -> Result<F> {
    let ld = dual_loss(dual)?;
    let lc = cross_loss(cross)?;
    let (lg, _) = gam_loss(dual, cross, gam)?;
    Ok(F::lit(weights.dual) * ld + F::lit(weights.cross) * lc + F::lit(weights.ga) * lg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn kernels() {
        assert_eq!(inner_kernel(&[1.0, 0.0], &[0.0, 1.0]), 0.0);
        assert_eq!(inner_kernel(&[3.0, 4.0], &[3.0, 4.0]), 25.0);
        assert_eq!(inner_kernel(&[1.0, 2.0], &[3.0, -1.0]), 1.0);
        assert_eq!(gaussian_kernel(&[1.0, 2.0], &[1.0, 2.0], 0.7).unwrap(), 1.0);
        // ‖diff‖² = 2 equals the width argument
        assert!((gaussian_kernel(&[1.0, 1.0], &[0.0, 0.0], 2.0).unwrap() - (-1f64).exp()).abs() < 1e-15);
        let near = gaussian_kernel(&[0.0], &[0.5], 1.0).unwrap();
        let far = gaussian_kernel(&[0.0], &[1.5], 1.0).unwrap();
        assert!(near > far);
        assert!(gaussian_kernel(&[0.0], &[1.0], 0.0).is_err());
    }

    #[test]
    fn uniform_distributions() {
        let z = Tensor::<f64>::zeros(&[4, 3]);
        let p = conditional_distribution(&z, &z, Kernel::Inner, 1.0, Direction::AGivenQ, true).unwrap();
        assert!(p.probs.data().iter().all(|&x| (x - 0.25).abs() < 1e-15));
        let p = conditional_distribution(&z, &z, Kernel::Inner, 1.0, Direction::QGivenQ, true).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let want = if i == j { 0.0 } else { 1.0 / 3.0 };
                assert!((p.probs.at(i, j) - want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn two_by_two_inner_kernel() {
        let q = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let a = t(&[2, 2], &[2.0, 0.0, 0.0, 2.0]);
        let p = conditional_distribution(&q, &a, Kernel::Inner, 1.0, Direction::AGivenQ, true).unwrap();
        let hi = 1.0 / (1.0 + (-2f64).exp());
        for (got, want) in p.probs.data().iter().zip([hi, 1.0 - hi, 1.0 - hi, hi]) {
            assert!((got - want).abs() < 1e-12);
        }
        assert!((p.probs.at(0, 0) - 0.8808).abs() < 1e-4);
    }

    #[test]
    fn dual_loss_oracles() {
        // diag +40, off-diag -40: score matrix realised with Q = 40·I, A = ±1 columns
        let scores = t(&[2, 2], &[40.0, -40.0, -40.0, 40.0]);
        assert!(retrieval_loss_from_scores(&scores).unwrap() < 1e-15);
        let eq = Tensor::<f64>::full(&[5, 5], 0.3);
        assert!((retrieval_loss_from_scores(&eq).unwrap() - 5f64.ln()).abs() < 1e-15);
        let id = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let want = (1.0 + (-1f64).exp()).ln();
        let b = EmbeddingBatch::new(id.clone(), id.clone(), Origin::Dual).unwrap();
        assert!((dual_loss(&b).unwrap() - want).abs() < 1e-10);
        let c = EmbeddingBatch::new(id.clone(), id, Origin::Cross).unwrap();
        assert_eq!(cross_loss(&c).unwrap(), dual_loss(&b).unwrap());
        assert!(dual_loss(&c).is_err());
    }

    #[test]
    fn single_pair_batch_rejected() {
        let one = t(&[1, 2], &[1.0, 0.0]);
        assert!(EmbeddingBatch::new(one.clone(), one, Origin::Dual).is_err());
    }

    #[test]
    fn kl_values() {
        let mk = |v: &[f64]| ConditionalDistribution {
            probs: t(&[1, 2], v),
            direction: Direction::AGivenQ,
            exclude_diagonal: false,
        };
        assert!((kl_alignment(&mk(&[1.0, 0.0]), &mk(&[0.5, 0.5])).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert_eq!(kl_alignment(&mk(&[0.3, 0.7]), &mk(&[0.3, 0.7])).unwrap(), 0.0);
        let other = ConditionalDistribution { direction: Direction::QGivenA, ..mk(&[0.5, 0.5]) };
        assert!(kl_alignment(&mk(&[0.5, 0.5]), &other).is_err());
    }

    #[test]
    fn gam_zero_weights_and_fixed_point() {
        let q = t(&[3, 2], &[0.1, 0.5, -0.3, 0.8, 1.2, -0.4]);
        let a = t(&[3, 2], &[0.4, -0.2, 0.9, 0.1, -0.6, 0.3]);
        let dual = EmbeddingBatch::new(q.clone(), a.clone(), Origin::Dual).unwrap();
        let cross = EmbeddingBatch::new(q, a, Origin::Cross).unwrap();
        let (v, comps) = gam_loss(&dual, &cross, &GamConfig::default()).unwrap();
        assert!(v.abs() <= 1e-8);
        assert!(comps.qq.unwrap().abs() <= 1e-12);
        let zero = GamConfig { weights: TermValues::uniform(0.0), ..Default::default() };
        assert_eq!(gam_loss(&dual, &cross, &zero).unwrap().0, 0.0);
        let mut off = GamConfig::default();
        off.enabled.aq = false;
        assert!(gam_loss(&dual, &cross, &off).unwrap().1.aq.is_none());
    }

    #[test]
    fn default_weights_and_warmup() {
        let w = LossWeights::default();
        assert_eq!((w.dual, w.cross, w.ga), (0.25, 0.25, 0.5));
        let gam = GamConfig::default();
        assert_eq!(gam.weights, TermValues { aq: 0.5, qa: 0.5, qq: 1e4, aa: 1e4 });
        assert_eq!(warmup_weight(0, 5, 0.5), 0.0);
        assert_eq!(warmup_weight(5, 5, 1e4), 1e4);
        assert_eq!(warmup_weight(9, 5, 1e4), 1e4);
        assert!((warmup_weight(2, 5, 0.5) - 0.2).abs() < 1e-15);
        assert_eq!(gam.scheduled_weights(0), TermValues::uniform(0.0));
    }

    #[test]
    fn total_loss_is_linear_in_weights() {
        let q = t(&[2, 2], &[0.1, 0.5, -0.3, 0.8]);
        let a = t(&[2, 2], &[0.4, -0.2, 0.9, 0.1]);
        let cq = t(&[2, 2], &[0.2, 0.1, -0.5, 0.3]);
        let ca = t(&[2, 2], &[0.7, -0.1, 0.2, 0.6]);
        let dual = EmbeddingBatch::new(q, a, Origin::Dual).unwrap();
        let cross = EmbeddingBatch::new(cq, ca, Origin::Cross).unwrap();
        let gam = GamConfig::default();
        let w = LossWeights::default();
        let base = total_loss(&dual, &cross, &w, &gam).unwrap();
        let doubled = LossWeights { dual: 0.5, cross: 0.5, ga: 1.0 };
        assert!((total_loss(&dual, &cross, &doubled, &gam).unwrap() - 2.0 * base).abs() < 1e-9 * base.abs().max(1.0));
        let zero = LossWeights { dual: 0.0, cross: 0.0, ga: 0.0 };
        assert_eq!(total_loss(&dual, &cross, &zero, &gam).unwrap(), 0.0);
    }

    #[test]
    fn inner_kernel_a_given_q_matches_score_softmax() {
        let q = t(&[3, 2], &[0.1, 0.5, -0.3, 0.8, 1.2, -0.4]);
        let a = t(&[3, 2], &[0.4, -0.2, 0.9, 0.1, -0.6, 0.3]);
        let p = conditional_distribution(&q, &a, Kernel::Inner, 1.0, Direction::AGivenQ, true).unwrap();
        for i in 0..3 {
            let scores: Vec<f64> = (0..3).map(|j| inner_kernel(q.row(i), a.row(j))).collect();
            let z: f64 = scores.iter().map(|s| s.exp()).sum();
            for j in 0..3 {
                assert!((p.probs.at(i, j) - scores[j].exp() / z).abs() < 1e-15);
            }
        }
    }
}
