//! Central-difference gradient checking.
//!
//! Analytic gradients come from the graph at the requested precision. The
//! numeric side is always evaluated in `f64` on the same parameter point,
//! so float32 rounding in the forward pass does not swamp the differences.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Float, Graph, NumericsError, OpKind, ParamStore, Var};

/// A scalar function of a parameter store, buildable at any precision.
pub trait Objective {
    fn loss<T: Float>(&self, params: &ParamStore<T>, g: &mut Graph<T>, vars: &[Var]) -> Result<Var, NumericsError>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub step: f64,
    /// Coordinates to sample; every coordinate is checked when the store
    /// has fewer.
    pub samples: usize,
    pub seed: u64,
    /// Denominator floor for the relative error, so coordinates whose true
    /// gradient is zero compare on an absolute scale.
    pub floor: f64,
    pub precision: Precision,
    /// Corrupts one backward rule in the analytic graph (mutation testing).
    pub fault: Option<OpKind>,
}

impl GradCheckConfig {
    /// Analytic gradients in `f64` with a correspondingly tighter floor.
    pub fn f64() -> Self {
        GradCheckConfig { precision: Precision::F64, floor: 1e-9, ..Default::default() }
    }
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig { step: 1e-3, samples: 256, seed: 0, floor: 1e-5, precision: Precision::F32, fault: None }
    }
}

#[derive(Clone, Debug)]
pub struct CoordinateCheck {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub mean_rel_error: f64,
    pub worst: Option<CoordinateCheck>,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.checked > 0 && self.max_rel_error < tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(floor);
    (analytic - numeric).abs() / denom
}

fn analytic_grads<T: Float, O: Objective>(
    obj: &O,
    params: &ParamStore<T>,
    fault: Option<OpKind>,
) -> Result<Vec<Vec<f64>>, NumericsError> {
    let mut g = Graph::<T>::new();
    if let Some(kind) = fault {
        g.inject_backward_fault(kind);
    }
    let vars = params.bind(&mut g);
    let loss = obj.loss(params, &mut g, &vars)?;
    if let Some((node, op)) = g.first_non_finite() {
        return Err(NumericsError::NonFinite { node: node.index(), op });
    }
    let grads = g.backward(loss)?;
    Ok(params
        .iter()
        .map(|(id, _, t)| grads.dense(vars[id.0], t.len()).into_iter().map(Float::as_f64).collect())
        .collect())
}

/// Forward-only evaluation in `f64`.
pub fn evaluate_f64<O: Objective>(obj: &O, params: &ParamStore<f64>) -> Result<f64, NumericsError> {
    let mut g = Graph::<f64>::new();
    let vars = params.bind(&mut g);
    let loss = obj.loss(params, &mut g, &vars)?;
    if let Some((node, op)) = g.first_non_finite() {
        return Err(NumericsError::NonFinite { node: node.index(), op });
    }
    Ok(g.value(loss).item())
}

pub fn check_gradients<O: Objective>(
    obj: &O,
    params: &ParamStore<f32>,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport, NumericsError> {
    let analytic = match cfg.precision {
        Precision::F32 => analytic_grads(obj, params, cfg.fault)?,
        Precision::F64 => analytic_grads(obj, &params.cast::<f64>(), cfg.fault)?,
    };

    let sizes: Vec<usize> = params.iter().map(|(_, _, t)| t.len()).collect();
    let total: usize = sizes.iter().sum();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut flat: Vec<usize> =
        if cfg.samples >= total { (0..total).collect() } else { sample(&mut rng, total, cfg.samples).into_vec() };
    flat.sort_unstable();

    let mut work = params.cast::<f64>();
    let mut report = GradCheckReport { checked: 0, max_rel_error: 0.0, mean_rel_error: 0.0, worst: None };
    let mut sum = 0.0;
    let mut p = 0;
    let mut base = 0;
    for idx in flat {
        while idx >= base + sizes[p] {
            base += sizes[p];
            p += 1;
        }
        let j = idx - base;
        let id = super::ParamId(p);
        let orig = work.get(id).data()[j];
        work.get_mut(id).data_mut()[j] = orig + cfg.step;
        let plus = evaluate_f64(obj, &work)?;
        work.get_mut(id).data_mut()[j] = orig - cfg.step;
        let minus = evaluate_f64(obj, &work)?;
        work.get_mut(id).data_mut()[j] = orig;

        let numeric = (plus - minus) / (2.0 * cfg.step);
        let a = analytic[p][j];
        let rel = relative_error(a, numeric, cfg.floor);
        sum += rel;
        report.checked += 1;
        if rel >= report.max_rel_error {
            report.max_rel_error = rel;
            report.worst = Some(CoordinateCheck {
                param: params.name(id).to_string(),
                index: j,
                analytic: a,
                numeric,
                rel_error: rel,
            });
        }
    }
    if report.checked > 0 {
        report.mean_rel_error = sum / report.checked as f64;
    }
    Ok(report)
}
