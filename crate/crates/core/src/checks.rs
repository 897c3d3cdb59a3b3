//! Gradient-check suites over every layer, one block and a small network.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::net::{Architecture, EgrNetModel, GcbSpec, NetworkVariant};
use crate::signal::Normalization;
use crate::tensor::ops::one_hot;
use crate::tensor::{
    gradient_check, BatchNormState, GradCheckOptions, GradCheckReport, Padding, Tape, Tensor, Var,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    Layer,
    Block,
    Net,
    All,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedCheck {
    pub name: String,
    pub report: GradCheckReport,
}

impl NamedCheck {
    pub fn passed(&self) -> bool {
        self.report.passed()
    }
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    Tensor::from_fn(shape, |_| scale * rng.gen_range(-1.0..1.0))
}

fn check(
    out: &mut Vec<NamedCheck>,
    name: &str,
    inputs: &[(&str, Tensor)],
    build: impl FnMut(&mut Tape, &[Var]) -> Result<Var>,
    opts: &GradCheckOptions,
) -> Result<()> {
    let report = gradient_check(inputs, build, opts)?;
    out.push(NamedCheck {
        name: name.to_string(),
        report,
    });
    Ok(())
}

/// Each differentiable op on its own.
pub fn layer_checks(opts: &GradCheckOptions) -> Result<Vec<NamedCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut out = Vec::new();
    for (stride, padding, k) in [
        (1, Padding::Same, 3),
        (2, Padding::Same, 3),
        (1, Padding::Same, 5),
        (2, Padding::Valid, 3),
    ] {
        let name = format!("conv2d k={k} stride={stride} {padding:?}").to_lowercase();
        check(
            &mut out,
            &name,
            &[
                ("input", random(&mut rng, &[2, 3, 7, 7], 1.0)),
                ("kernels", random(&mut rng, &[4, 3, k, k], 0.5)),
                ("bias", random(&mut rng, &[4], 0.5)),
            ],
            |t, v| t.conv2d(v[0], v[1], v[2], stride, padding),
            opts,
        )?;
    }
    for training in [true, false] {
        let mut state = BatchNormState::new(3);
        state.running_mean = vec![0.2, -0.1, 0.4];
        state.running_var = vec![0.8, 1.3, 0.5];
        let name = if training {
            "batchnorm (training)"
        } else {
            "batchnorm (inference)"
        };
        check(
            &mut out,
            name,
            &[
                ("input", random(&mut rng, &[4, 3, 3, 3], 2.0)),
                ("gamma", random(&mut rng, &[3], 1.5)),
                ("beta", random(&mut rng, &[3], 1.0)),
            ],
            |t, v| t.batchnorm(v[0], v[1], v[2], &state, training),
            opts,
        )?;
    }
    check(
        &mut out,
        "layernorm",
        &[("input", random(&mut rng, &[2, 3, 4, 4], 2.0))],
        |t, v| t.layernorm(v[0]),
        opts,
    )?;
    // keep inputs away from the kink so no coordinate is skipped
    let away = Tensor::from_fn(&[2, 2, 4, 4], |i| {
        let v: f64 = rng.gen_range(0.05..1.0);
        if i % 3 == 0 {
            -v
        } else {
            v
        }
    });
    check(
        &mut out,
        "relu",
        &[("input", away)],
        |t, v| t.relu(v[0]),
        opts,
    )?;
    check(
        &mut out,
        "channel_gram",
        &[("input", random(&mut rng, &[2, 3, 5, 5], 1.0))],
        |t, v| t.channel_gram(v[0]),
        opts,
    )?;
    check(
        &mut out,
        "concat_channels",
        &[
            ("a", random(&mut rng, &[2, 2, 3, 3], 1.0)),
            ("b", random(&mut rng, &[2, 3, 3, 3], 1.0)),
        ],
        |t, v| t.concat_channels(v[0], v[1]),
        opts,
    )?;
    check(
        &mut out,
        "global_average_pool",
        &[("input", random(&mut rng, &[2, 3, 4, 4], 1.0))],
        |t, v| t.global_average_pool(v[0]),
        opts,
    )?;
    check(
        &mut out,
        "dense",
        &[
            ("input", random(&mut rng, &[3, 5], 1.0)),
            ("weights", random(&mut rng, &[4, 5], 1.0)),
            ("bias", random(&mut rng, &[4], 1.0)),
        ],
        |t, v| t.dense(v[0], v[1], v[2]),
        opts,
    )?;
    let targets = one_hot(&[2, 0, 1], 4)?;
    check(
        &mut out,
        "softmax_cross_entropy",
        &[("logits", random(&mut rng, &[3, 4], 3.0))],
        |t, v| t.softmax_cross_entropy(v[0], &targets),
        opts,
    )?;
    Ok(out)
}

fn toy_arch(variant: NetworkVariant, blocks: Vec<GcbSpec>) -> Architecture {
    Architecture {
        variant,
        blocks,
        num_classes: 3,
        input_side: 8,
        normalize_egr_input: true,
        normalization: Normalization::Variance,
    }
}

/// Named leaves for every parameter of `model` plus both inputs.
fn model_inputs(model: &EgrNetModel, rng: &mut ChaCha8Rng, batch: usize) -> Vec<(String, Tensor)> {
    let mut inputs: Vec<(String, Tensor)> = model
        .named_tensors()
        .into_iter()
        .filter(|(n, _)| !n.contains("running"))
        .map(|(n, t)| {
            // random BN affine parameters exercise more of the backward pass
            if n.ends_with("gamma") || n.ends_with("beta") {
                let shape = t.shape().to_vec();
                (n, random(rng, &shape, 1.0))
            } else {
                (n, t)
            }
        })
        .collect();
    let side = model.architecture().input_side;
    inputs.push(("rsm".into(), random(rng, &[batch, 1, side, side], 1.0)));
    if model.variant().uses_egr() {
        inputs.push(("egr".into(), random(rng, &[batch, 1, side, side], 1.0)));
    }
    inputs
}

/// One Gramian convolutional block, with and without the bridge, through
/// its parameters and both inputs.
pub fn block_checks(opts: &GradCheckOptions) -> Result<Vec<NamedCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0xB10C);
    let mut out = Vec::new();
    for variant in [NetworkVariant::EgrNet, NetworkVariant::EgrNetNoBc] {
        let model = EgrNetModel::new(toy_arch(variant, vec![GcbSpec::new(3, 3, 1)]), opts.seed)?;
        let named = model_inputs(&model, &mut rng, 3);
        let block = model.blocks[0].clone();
        let inputs: Vec<(&str, Tensor)> = named
            .iter()
            .filter(|(n, _)| n.starts_with("block0") || n == "rsm" || n == "egr")
            .map(|(n, t)| (n.as_str(), t.clone()))
            .collect();
        let name = format!("gcb ({variant})");
        check(
            &mut out,
            &name,
            &inputs,
            |t, v| {
                let n = v.len();
                let nodes =
                    block.forward_on(t, v[n - 2], Some(v[n - 1]), &v[..n - 2], variant, true)?;
                t.concat_channels(nodes.x_out, nodes.g_out.expect("EGR branch present"))
            },
            opts,
        )?;
    }
    Ok(out)
}

/// A two-block network on 8×8 inputs, from inputs and every parameter to
/// the cross-entropy loss, for each variant.
pub fn net_checks(opts: &GradCheckOptions) -> Result<Vec<NamedCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x4E37);
    let mut out = Vec::new();
    let targets = one_hot(&[0, 2, 1, 2], 3)?;
    for variant in NetworkVariant::ALL {
        let arch = toy_arch(variant, vec![GcbSpec::new(3, 2, 1), GcbSpec::new(3, 3, 2)]);
        let model = EgrNetModel::new(arch, opts.seed)?;
        let named = model_inputs(&model, &mut rng, 4);
        let inputs: Vec<(&str, Tensor)> =
            named.iter().map(|(n, t)| (n.as_str(), t.clone())).collect();
        let n_params = inputs.len() - 1 - variant.uses_egr() as usize;
        let name = format!("two-block net ({variant})");
        check(
            &mut out,
            &name,
            &inputs,
            |t, v| {
                let egr = variant.uses_egr().then(|| v[n_params + 1]);
                let nodes = model.forward_on(t, &v[..n_params], v[n_params], egr, true)?;
                t.softmax_cross_entropy(nodes.logits, &targets)
            },
            opts,
        )?;
    }
    Ok(out)
}

pub fn run_suite(scope: Scope, opts: &GradCheckOptions) -> Result<Vec<NamedCheck>> {
    let mut out = Vec::new();
    if matches!(scope, Scope::Layer | Scope::All) {
        out.extend(layer_checks(opts)?);
    }
    if matches!(scope, Scope::Block | Scope::All) {
        out.extend(block_checks(opts)?);
    }
    if matches!(scope, Scope::Net | Scope::All) {
        out.extend(net_checks(opts)?);
    }
    Ok(out)
}
