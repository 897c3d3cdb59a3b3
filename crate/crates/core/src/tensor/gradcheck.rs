//! Central-difference gradient checks.
//!
//! A graph's output is reduced to a scalar `L = Σ rᵢ·outᵢ` with fixed
//! random weights `r`. For sampled coordinates of every input, the tape's
//! gradient `a` is compared with `n = (L(x+h) − L(x−h)) / 2h` using
//!
//! ```text
//! rel = |a − n| / max(|a|, |n|, floor · max |a|, 1e-12)
//! ```
//!
//! where `max |a|` runs over every checked input, so coordinates whose
//! gradient is tiny next to the rest of the graph are held to an absolute
//! bound instead. This matters for gradients that vanish identically, such
//! as a conv bias followed by batch norm.
//!
//! A coordinate within `h` of a kink (ReLU at 0) is skipped. It shows up
//! either as central differences at `h` and `h/2` that disagree, or as a
//! gap between the forward and backward one-sided differences that does
//! not shrink when `h` is halved (for a smooth function the gap is
//! `≈ h·f''`). The check fails if more than a tenth of the coordinates of
//! any tensor are skipped.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tape::{Tape, Var};
use super::Tensor;
use crate::error::Result;

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tolerance: f64,
    pub coords_per_tensor: usize,
    pub floor: f64,
    pub seed: u64,
    /// Multiplies every analytic gradient before comparison; a negative
    /// control for the checker itself.
    pub fault: Option<f64>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            tolerance: 1e-4,
            coords_per_tensor: 50,
            floor: 1e-3,
            seed: 0x6772_6164,
            fault: None,
        }
    }
}

impl GradCheckOptions {
    pub fn with_tolerance(mut self, tolerance: f64) -> Self {
        self.tolerance = tolerance;
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorCheck {
    pub name: String,
    pub checked: usize,
    pub skipped: usize,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorCheck>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.tensors
            .iter()
            .map(|t| t.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.tensors
            .iter()
            .all(|t| t.max_rel_error <= self.tolerance && t.skipped * 10 <= t.checked + t.skipped)
    }
}

/// Checks the tape gradients of the graph built by `build` with respect to
/// every named input.
pub fn gradient_check<F>(
    inputs: &[(&str, Tensor)],
    mut build: F,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|(_, t)| tape.leaf(t.clone())).collect();
    let out = build(&mut tape, &vars)?;
    let weights: Vec<f64> = if tape.value(out).numel() == 1 {
        vec![1.0]
    } else {
        (0..tape.value(out).numel())
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect()
    };
    let loss = tape.weighted_sum(out, weights.clone())?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, (_, t))| tape.take_grad(*v).unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();
    drop(tape);

    let mut values: Vec<Tensor> = inputs.iter().map(|(_, t)| t.clone()).collect();
    let mut eval = |vals: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = build(&mut tape, &vars)?;
        Ok(tape
            .value(out)
            .data()
            .iter()
            .zip(&weights)
            .map(|(a, b)| a * b)
            .sum())
    };

    let base = eval(&values)?;
    let scale = analytic
        .iter()
        .flatten()
        .fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = (opts.floor * scale).max(1e-12);
    let mut tensors = Vec::with_capacity(inputs.len());
    for (ti, (name, _)) in inputs.iter().enumerate() {
        let numel = values[ti].numel();
        let coords: Vec<usize> = if numel <= opts.coords_per_tensor {
            (0..numel).collect()
        } else {
            let mut c = sample(&mut rng, numel, opts.coords_per_tensor).into_vec();
            c.sort_unstable();
            c
        };
        let grad = &analytic[ti];
        let mut check = TensorCheck {
            name: name.to_string(),
            checked: 0,
            skipped: 0,
            max_rel_error: 0.0,
        };
        for &i in &coords {
            let x0 = values[ti].data()[i];
            let mut at = |x: f64, vals: &mut Vec<Tensor>| -> Result<f64> {
                vals[ti].data_mut()[i] = x;
                let v = eval(vals);
                vals[ti].data_mut()[i] = x0;
                v
            };
            let h = opts.step;
            let (up, down) = (at(x0 + h, &mut values)?, at(x0 - h, &mut values)?);
            let (up2, down2) = (
                at(x0 + h / 2.0, &mut values)?,
                at(x0 - h / 2.0, &mut values)?,
            );
            let n = (up - down) / (2.0 * h);
            let n_half = (up2 - down2) / h;
            let gap = ((up - base) - (base - down)).abs() / h;
            let gap_half = ((up2 - base) - (base - down2)).abs() / (h / 2.0);
            let limit = opts.tolerance * n.abs().max(n_half.abs()).max(floor);
            let drifts = (n - n_half).abs() > limit;
            let stuck_gap = gap > limit && gap_half > 0.75 * gap;
            if drifts || stuck_gap {
                check.skipped += 1;
                continue;
            }
            let a = grad[i] * opts.fault.unwrap_or(1.0);
            let rel = (a - n).abs() / a.abs().max(n.abs()).max(floor);
            check.max_rel_error = check.max_rel_error.max(rel);
            check.checked += 1;
        }
        tensors.push(check);
    }
    Ok(GradCheckReport {
        tensors,
        tolerance: opts.tolerance,
    })
}
