//! Automated weighted cross-entropy and the neighborhood (inclusion) penalty.
//!
//! Every loss has a matching `*_grad` function returning the exact gradient
//! with respect to the predicted probabilities. Gradients of the penalty treat
//! its indicator mask as a constant.

use ndarray::{Array2, Array3, ArrayView2, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::probmap::{ProbMap, NUM_CLASSES};
use crate::{INFARCTION, MYO, NO_REFLOW};

/// Floor applied to predicted probabilities before taking the logarithm.
pub const LOG_FLOOR: f64 = 1e-8;

/// Default coefficient of the neighboring loss in the total objective.
pub const DEFAULT_COEFF_NP: f64 = 1e-2;

/// Per-class cross-entropy weights.
///
/// Weights from the weight generator sum to the class count; hand-built
/// vectors only need to be positive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightVector(Vec<f64>);

impl WeightVector {
    pub fn new(w: Vec<f64>) -> Result<Self> {
        if let Some(bad) = w.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
            return Err(Error::Shape(format!("class weight {bad} is not positive")));
        }
        Ok(Self(w))
    }

    /// All-ones weights: plain cross-entropy.
    pub fn uniform(classes: usize) -> Self {
        Self(vec![1.0; classes])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Thresholds of the neighborhood penalty mask.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PenaltyConfig {
    /// A pixel only counts while `a * b < 1 - epsilon`.
    pub epsilon: f64,
    /// Support threshold: a map "contains" a pixel when its value exceeds `tau`.
    pub tau: f64,
}

impl Default for PenaltyConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-3,
            tau: 0.05,
        }
    }
}

impl PenaltyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon < 1.0) {
            return Err(Error::Config(format!(
                "penalty epsilon {} must lie in [0,1)",
                self.epsilon
            )));
        }
        if !(self.tau >= 0.0 && self.tau < 1.0) {
            return Err(Error::Config(format!("penalty tau {} must lie in [0,1)", self.tau)));
        }
        Ok(())
    }

    #[inline]
    fn active(&self, a: f64, b: f64) -> bool {
        a > self.tau && b > self.tau && a * b < 1.0 - self.epsilon
    }
}

/// Loss values of one evaluation of the training objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub awce: f64,
    pub neighboring: f64,
    pub total: f64,
    pub coeff_np: f64,
    pub weights_used: WeightVector,
}

impl LossBreakdown {
    /// Element-wise mean of several breakdowns (batch logging).
    pub fn mean(items: &[LossBreakdown]) -> Option<LossBreakdown> {
        let first = items.first()?;
        let n = items.len() as f64;
        let mut w = vec![0.0; first.weights_used.len()];
        let (mut awce, mut nb, mut total) = (0.0, 0.0, 0.0);
        for it in items {
            awce += it.awce;
            nb += it.neighboring;
            total += it.total;
            for (acc, v) in w.iter_mut().zip(it.weights_used.as_slice()) {
                *acc += v;
            }
        }
        w.iter_mut().for_each(|v| *v /= n);
        Some(LossBreakdown {
            awce: awce / n,
            neighboring: nb / n,
            total: total / n,
            coeff_np: first.coeff_np,
            weights_used: WeightVector(w),
        })
    }
}

/// Gradient of a prediction-based loss.
#[derive(Debug, Clone)]
pub struct LossGradient {
    /// d loss / d pred, channels-first like [`ProbMap`].
    pub pred: Array3<f64>,
    /// d loss / d w (zero for terms that do not involve the weights).
    pub weights: Vec<f64>,
}

fn check_pair(pred: &ProbMap, target: &ProbMap, w: &WeightVector) -> Result<()> {
    if pred.dim() != target.dim() {
        return Err(Error::Shape(format!(
            "prediction {:?} and target {:?} differ in shape",
            pred.dim(),
            target.dim()
        )));
    }
    if w.len() != pred.classes() || w.len() != NUM_CLASSES {
        return Err(Error::Shape(format!(
            "weight vector has length {}, expected {}",
            w.len(),
            NUM_CLASSES
        )));
    }
    Ok(())
}

fn pixel_count(pred: &ProbMap) -> f64 {
    (pred.height() * pred.width()) as f64
}

/// Weighted cross-entropy `-(1/N) Σ_x Σ_i w_i Y_i(x) log Ŷ_i(x)`.
///
/// Targets may be soft (mix-up). Predictions are floored at [`LOG_FLOOR`].
pub fn awce(pred: &ProbMap, target: &ProbMap, w: &WeightVector) -> Result<f64> {
    check_pair(pred, target, w)?;
    let n = pixel_count(pred);
    let mut acc = 0.0;
    for (k, &wk) in w.as_slice().iter().enumerate() {
        let s: f64 = Zip::from(pred.channel(k))
            .and(target.channel(k))
            .fold(0.0, |s, &p, &y| s + y * p.max(LOG_FLOOR).ln());
        acc += wk * s;
    }
    Ok(-acc / n)
}

/// Unweighted cross-entropy, written independently of [`awce`].
pub fn cross_entropy(pred: &ProbMap, target: &ProbMap) -> Result<f64> {
    if pred.dim() != target.dim() {
        return Err(Error::Shape("prediction and target differ in shape".into()));
    }
    let n = pixel_count(pred);
    let s: f64 = Zip::from(pred.values())
        .and(target.values())
        .fold(0.0, |s, &p, &y| s - y * p.max(LOG_FLOOR).ln());
    Ok(s / n)
}

pub fn awce_grad(pred: &ProbMap, target: &ProbMap, w: &WeightVector) -> Result<LossGradient> {
    check_pair(pred, target, w)?;
    let n = pixel_count(pred);
    let mut grad = Array3::zeros(pred.dim());
    let mut grad_w = vec![0.0; w.len()];
    for (k, &wk) in w.as_slice().iter().enumerate() {
        let mut gk = grad.index_axis_mut(ndarray::Axis(0), k);
        let mut log_sum = 0.0;
        Zip::from(&mut gk)
            .and(pred.channel(k))
            .and(target.channel(k))
            .for_each(|g, &p, &y| {
                log_sum += y * p.max(LOG_FLOOR).ln();
                if p > LOG_FLOOR {
                    *g = -wk * y / (n * p);
                }
            });
        grad_w[k] = -log_sum / n;
    }
    Ok(LossGradient {
        pred: grad,
        weights: grad_w,
    })
}

fn check_maps(a: &ArrayView2<'_, f64>, b: &ArrayView2<'_, f64>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!(
            "penalty maps differ in shape: {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    Ok(())
}

/// Penalty between two supporting maps: the mean over all pixels of
/// `mask(x) * (1 - a(x) - b(x))`, where the mask keeps pixels inside both
/// supports whose product has not yet saturated.
pub fn neighborhood_penalty(
    a: ArrayView2<'_, f64>,
    b: ArrayView2<'_, f64>,
    cfg: &PenaltyConfig,
) -> Result<f64> {
    check_maps(&a, &b)?;
    let n = a.len() as f64;
    let s = Zip::from(&a).and(&b).fold(0.0, |s, &av, &bv| {
        if cfg.active(av, bv) {
            s + (1.0 - av - bv)
        } else {
            s
        }
    });
    Ok(s / n)
}

/// Gradients of [`neighborhood_penalty`] with respect to `a` and `b`.
/// They are identical: `-1/N` on active pixels, zero elsewhere.
pub fn neighborhood_penalty_grad(
    a: ArrayView2<'_, f64>,
    b: ArrayView2<'_, f64>,
    cfg: &PenaltyConfig,
) -> Result<(Array2<f64>, Array2<f64>)> {
    check_maps(&a, &b)?;
    let n = a.len() as f64;
    let g = Zip::from(&a).and(&b).map_collect(|&av, &bv| {
        if cfg.active(av, bv) {
            -1.0 / n
        } else {
            0.0
        }
    });
    Ok((g.clone(), g))
}

/// Cumulative lesion maps: (no-reflow, whole infarction, whole myocardium).
fn nested_maps(pred: &ProbMap) -> Result<(Array2<f64>, Array2<f64>, Array2<f64>)> {
    if pred.classes() != NUM_CLASSES {
        return Err(Error::Shape(format!(
            "neighboring loss needs {NUM_CLASSES} channels, got {}",
            pred.classes()
        )));
    }
    let nf = pred.channel(NO_REFLOW as usize).to_owned();
    let whole_inf = &nf + &pred.channel(INFARCTION as usize);
    let whole_myo = &whole_inf + &pred.channel(MYO as usize);
    Ok((nf, whole_inf, whole_myo))
}

/// Sum of the two nested penalties: no-reflow inside whole infarction, and
/// whole infarction inside whole myocardium.
pub fn neighboring_loss(pred: &ProbMap, cfg: &PenaltyConfig) -> Result<f64> {
    let (nf, inf, myo) = nested_maps(pred)?;
    Ok(neighborhood_penalty(nf.view(), inf.view(), cfg)?
        + neighborhood_penalty(inf.view(), myo.view(), cfg)?)
}

pub fn neighboring_loss_grad(pred: &ProbMap, cfg: &PenaltyConfig) -> Result<Array3<f64>> {
    let (nf, inf, myo) = nested_maps(pred)?;
    let (g_a1, g_b1) = neighborhood_penalty_grad(nf.view(), inf.view(), cfg)?;
    let (g_a2, g_b2) = neighborhood_penalty_grad(inf.view(), myo.view(), cfg)?;
    // Chain rule through the cumulative sums.
    let d_myo_map = g_b2;
    let d_inf_map = &g_b1 + &g_a2 + &d_myo_map;
    let d_nf_map = &g_a1 + &d_inf_map;
    let mut grad = Array3::zeros(pred.dim());
    grad.index_axis_mut(ndarray::Axis(0), NO_REFLOW as usize)
        .assign(&d_nf_map);
    grad.index_axis_mut(ndarray::Axis(0), INFARCTION as usize)
        .assign(&d_inf_map);
    grad.index_axis_mut(ndarray::Axis(0), MYO as usize)
        .assign(&d_myo_map);
    Ok(grad)
}

/// `awce + coeff_np * neighboring_loss`; the cross-entropy coefficient is 1.
pub fn total_loss(
    pred: &ProbMap,
    target: &ProbMap,
    w: &WeightVector,
    cfg: &PenaltyConfig,
    coeff_np: f64,
) -> Result<LossBreakdown> {
    let awce = awce(pred, target, w)?;
    let neighboring = neighboring_loss(pred, cfg)?;
    Ok(LossBreakdown {
        awce,
        neighboring,
        total: awce + coeff_np * neighboring,
        coeff_np,
        weights_used: w.clone(),
    })
}

pub fn total_loss_grad(
    pred: &ProbMap,
    target: &ProbMap,
    w: &WeightVector,
    cfg: &PenaltyConfig,
    coeff_np: f64,
) -> Result<LossGradient> {
    let mut g = awce_grad(pred, target, w)?;
    if coeff_np != 0.0 {
        let gn = neighboring_loss_grad(pred, cfg)?;
        g.pred.scaled_add(coeff_np, &gn);
    }
    Ok(g)
}

/// Prediction-based loss selector for [`loss_gradient`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossTerm {
    Awce,
    Neighboring,
    Total,
}

/// Inputs shared by every [`LossTerm`].
#[derive(Debug, Clone, Copy)]
pub struct LossInputs<'a> {
    pub target: &'a ProbMap,
    pub weights: &'a WeightVector,
    pub penalty: &'a PenaltyConfig,
    pub coeff_np: f64,
}

pub fn loss_value(term: LossTerm, pred: &ProbMap, inputs: &LossInputs<'_>) -> Result<f64> {
    match term {
        LossTerm::Awce => awce(pred, inputs.target, inputs.weights),
        LossTerm::Neighboring => neighboring_loss(pred, inputs.penalty),
        LossTerm::Total => total_loss(
            pred,
            inputs.target,
            inputs.weights,
            inputs.penalty,
            inputs.coeff_np,
        )
        .map(|b| b.total),
    }
}

/// Gradient of the selected term with respect to `pred` (and the weights).
pub fn loss_gradient(term: LossTerm, pred: &ProbMap, inputs: &LossInputs<'_>) -> Result<LossGradient> {
    match term {
        LossTerm::Awce => awce_grad(pred, inputs.target, inputs.weights),
        LossTerm::Neighboring => Ok(LossGradient {
            pred: neighboring_loss_grad(pred, inputs.penalty)?,
            weights: vec![0.0; inputs.weights.len()],
        }),
        LossTerm::Total => total_loss_grad(
            pred,
            inputs.target,
            inputs.weights,
            inputs.penalty,
            inputs.coeff_np,
        ),
    }
}
