//! Built-in numerical and metric checks on fixture data.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::MaskedBatch;
use crate::fixtures::{tiny_batch, tiny_model};
use crate::metrics::{avg, paired_f_score, v_measure};
use crate::model::{ForwardOptions, LossObjective, ModelError, PolyLm};
use crate::numerics::{check_gradients, relative_error, Float, GradCheckConfig, OpKind};
use crate::training::Schedule;

/// Worst disagreement between the probe −∂(J^LM + J^D)/∂logit · |T| and
/// the closed form q^sharp − p, over every target and sense.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbeError {
    pub max_abs: f64,
    pub max_rel: f64,
}

/// Compares the logit gradient with its closed form at precision `T`.
/// `fault` corrupts one backward rule first.
pub fn appendix_probe<T: Float>(
    model: &PolyLm,
    batch: &MaskedBatch,
    r: f64,
    fault: Option<OpKind>,
) -> Result<ProbeError, ModelError> {
    let opts = ForwardOptions { r, lambda_m: 0.0, match_pass: false, ..ForwardOptions::default() };
    let params = model.params.cast::<T>();
    let mut f = model.forward_with(&params, batch, &opts, &mut ChaCha8Rng::seed_from_u64(0))?;
    if let Some(op) = fault {
        f.graph.inject_backward_fault(op);
    }
    let grads = f.graph.backward(f.vars.total)?;
    let gl = grads.dense(f.vars.logits, f.outputs.logits.len());
    let s = model.inventory.total();
    let n = f.outputs.target_words.len() as f64;
    let mut err = ProbeError { max_abs: 0.0, max_rel: 0.0 };
    for (i, &w) in f.outputs.target_words.iter().enumerate() {
        let p = f.outputs.p(i);
        let logits = &f.outputs.logits[i * s..(i + 1) * s];
        let block = model.inventory.senses(w);
        let m = block.clone().map(|k| r * logits[k]).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = block.clone().map(|k| (r * logits[k] - m).exp()).sum();
        for k in 0..s {
            let sharp = if block.contains(&k) { (r * logits[k] - m).exp() / z } else { 0.0 };
            let want = sharp - p[k];
            let got = -gl[i * s + k].as_f64() * n;
            err.max_abs = err.max_abs.max((got - want).abs());
            err.max_rel = err.max_rel.max(relative_error(got, want, 1e-6));
        }
    }
    Ok(err)
}

#[derive(Clone, Debug)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, Default)]
pub struct SelfCheckReport {
    pub checks: Vec<Check>,
}

impl SelfCheckReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    fn record(&mut self, name: &'static str, outcome: Result<(bool, String), String>) {
        let (passed, detail) = outcome.unwrap_or_else(|e| (false, format!("error: {e}")));
        self.checks.push(Check { name, passed, detail });
    }
}

/// Runs the gradient identities, normalization and degeneration checks,
/// schedule anchors and metric oracles. `fault` corrupts one backward rule
/// in every differentiated graph.
pub fn run(fault: Option<OpKind>) -> SelfCheckReport {
    let mut rep = SelfCheckReport::default();
    let model = tiny_model(4, 17);
    let batch = tiny_batch(&model);

    rep.record(
        "logit gradient identity (f64)",
        appendix_probe::<f64>(&model, &batch, 1.5, fault)
            .map(|e| (e.max_abs < 1e-4, format!("max abs error {:.2e}", e.max_abs)))
            .map_err(|e| e.to_string()),
    );
    rep.record(
        "logit gradient identity (f32)",
        appendix_probe::<f32>(&model, &batch, 1.5, fault)
            .map(|e| (e.max_rel < 1e-2, format!("max rel error {:.2e}", e.max_rel)))
            .map_err(|e| e.to_string()),
    );
    rep.record(
        "full-loss finite differences",
        (|| {
            let obj =
                LossObjective::new(&model, &batch, ForwardOptions { r: 1.5, lambda_m: 0.1, ..Default::default() })
                    .map_err(|e| e.to_string())?;
            let cfg = GradCheckConfig { samples: 200, fault, ..GradCheckConfig::default() };
            let r = check_gradients(&obj, &model.params, &cfg).map_err(|e| e.to_string())?;
            Ok((r.passes(1e-2), format!("{} coordinates, max rel error {:.2e}", r.checked, r.max_rel_error)))
        })(),
    );
    rep.record(
        "distribution normalization",
        (|| {
            let f = model
                .forward(&batch, &ForwardOptions::default(), &mut ChaCha8Rng::seed_from_u64(0))
                .map_err(|e| e.to_string())?;
            let o = &f.outputs;
            let mut worst: f64 = 0.0;
            for q in o.q_p.iter().chain(&o.q_d_masked).chain(&o.q_d_clean) {
                worst = worst.max((q.iter().sum::<f64>() - 1.0).abs());
            }
            for i in 0..o.targets.len() {
                worst = worst.max((o.p(i).iter().sum::<f64>() - 1.0).abs());
            }
            Ok((worst < 1e-5, format!("max |sum - 1| = {worst:.2e}")))
        })(),
    );
    rep.record(
        "single-sense degeneration",
        (|| {
            let unit = tiny_model(1, 17);
            let b = tiny_batch(&unit);
            let lambda = 0.1;
            let o = unit
                .forward(
                    &b,
                    &ForwardOptions { r: 1.5, lambda_m: lambda, ..Default::default() },
                    &mut ChaCha8Rng::seed_from_u64(0),
                )
                .map_err(|e| e.to_string())?
                .outputs;
            let ok = o.j_d == 0.0 && (o.j_m + lambda).abs() < 1e-6;
            Ok((ok, format!("J_D = {}, J_M = {}", o.j_d, o.j_m)))
        })(),
    );
    rep.record(
        "schedule anchors",
        Ok({
            let s = Schedule::paper();
            let ok = s.at(0).r == 1.0
                && s.at(10_000).lr == 3e-5
                && s.at(1_000_000).lambda_m == 0.1
                && s.at(2_000_000).r == 1.5
                && s.at(s.total_steps()).lr == 0.0;
            (ok, "lr, lambda and r at their ramp ends".to_string())
        }),
    );
    rep.record(
        "metric oracles",
        (|| {
            let f = paired_f_score(&["a", "a", "b", "b"], &["x", "x", "x", "y"]).map_err(|e| e.to_string())?;
            let v = v_measure(&[0, 0, 0, 0], &[0, 0, 1, 1]).map_err(|e| e.to_string())?;
            let same = v_measure(&[0, 1, 1], &[5, 7, 7]).map_err(|e| e.to_string())?;
            let a = avg(64.8, 23.0);
            let ok = (f - 0.4).abs() < 1e-12 && v == 0.0 && same == 1.0 && (a - 38.6).abs() < 0.05;
            Ok((ok, format!("paired F {f}, V-M {v}/{same}, AVG {a:.2}")))
        })(),
    );
    rep
}
