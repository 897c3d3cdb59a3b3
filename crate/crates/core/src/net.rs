//! EGR-Net: stacked Gramian convolutional blocks (GCBs) over an RSM branch
//! and an EGR branch, joined by the bridge connection.
//!
//! Per block, with `X` the RSM-branch input and `G` the EGR-branch input:
//!
//! ```text
//! X_h  = ReLU(BN(conv(X)))
//! G_h  = ReLU(BN(conv(G)))
//! XG_h = LN(channel_gram(X_h))
//! out  = (X_h, concat(G_h, XG_h))      bridge variant
//!        (X_h, G_h)                     no-bridge variant
//! ```
//!
//! After the last block both branches are concatenated, averaged per channel
//! and fed to a single dense layer.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::{
    build_rsm, gram, normalize_sample_with, GaussianStream, Normalization, RsmConfig, Signal,
};
use crate::tensor::checkpoint::{read_checkpoint, write_checkpoint};
use crate::tensor::ops::{self, ChannelStats};
use crate::tensor::{adam_step, AdamState, BatchNormState, ConvParams, Padding, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GcbSpec {
    pub kernel_size: usize,
    pub out_channels: usize,
    pub stride: usize,
}

impl GcbSpec {
    pub const fn new(kernel_size: usize, out_channels: usize, stride: usize) -> Self {
        GcbSpec {
            kernel_size,
            out_channels,
            stride,
        }
    }
}

pub const CANONICAL_BLOCKS: [GcbSpec; 5] = [
    GcbSpec::new(5, 32, 1),
    GcbSpec::new(5, 32, 1),
    GcbSpec::new(3, 64, 1),
    GcbSpec::new(3, 64, 2),
    GcbSpec::new(3, 128, 2),
];

pub const CANONICAL_INPUT_SIDE: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NetworkVariant {
    EgrNet,
    /// Both branches, no bridge connection.
    EgrNetNoBc,
    /// RSM branch only.
    CnnRsm,
}

impl NetworkVariant {
    pub const ALL: [NetworkVariant; 3] = [
        NetworkVariant::EgrNet,
        NetworkVariant::EgrNetNoBc,
        NetworkVariant::CnnRsm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            NetworkVariant::EgrNet => "egr-net",
            NetworkVariant::EgrNetNoBc => "egr-net-no-bc",
            NetworkVariant::CnnRsm => "cnn-rsm",
        }
    }

    pub fn uses_egr(self) -> bool {
        self != NetworkVariant::CnnRsm
    }

    pub fn has_bridge(self) -> bool {
        self == NetworkVariant::EgrNet
    }
}

impl fmt::Display for NetworkVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for NetworkVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        NetworkVariant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                Error::invalid(format!(
                    "unknown variant {s:?} (expected egr-net, egr-net-no-bc or cnn-rsm)"
                ))
            })
    }
}

fn default_true() -> bool {
    true
}

/// Everything needed to rebuild a model's shape and preprocessing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub variant: NetworkVariant,
    pub blocks: Vec<GcbSpec>,
    pub num_classes: usize,
    /// Side of the square RSM (and EGR) input.
    pub input_side: usize,
    /// Layer-normalize the input EGR per plane before the first block.
    #[serde(default = "default_true")]
    pub normalize_egr_input: bool,
    #[serde(default)]
    pub normalization: Normalization,
}

/// Analytic FLOP count, two per multiply-add. Only the multiply-add
/// layers are counted; normalization, activations, pooling and softmax
/// are left out.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopCount {
    pub input_gram: u64,
    pub conv: u64,
    pub bridge_gram: u64,
    pub dense: u64,
}

impl FlopCount {
    pub fn total(&self) -> u64 {
        self.input_gram + self.conv + self.bridge_gram + self.dense
    }
}

impl Architecture {
    pub fn canonical(num_classes: usize, variant: NetworkVariant) -> Self {
        Architecture {
            variant,
            blocks: CANONICAL_BLOCKS.to_vec(),
            num_classes,
            input_side: CANONICAL_INPUT_SIDE,
            normalize_egr_input: true,
            normalization: Normalization::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(Error::invalid("num_classes must be at least 1"));
        }
        if self.input_side == 0 {
            return Err(Error::invalid("input_side must be positive"));
        }
        if self.blocks.is_empty() {
            return Err(Error::invalid("at least one block is required"));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            if b.kernel_size == 0 || b.out_channels == 0 || b.stride == 0 {
                return Err(Error::invalid(format!(
                    "block {i}: kernel size, channels and stride must be positive, got {b:?}"
                )));
            }
        }
        Ok(())
    }

    /// Output side after each block.
    pub fn spatial_trace(&self) -> Vec<usize> {
        let mut side = self.input_side;
        self.blocks
            .iter()
            .map(|b| {
                side = side.div_ceil(b.stride);
                side
            })
            .collect()
    }

    pub fn rsm_channels(&self) -> Vec<usize> {
        self.blocks.iter().map(|b| b.out_channels).collect()
    }

    /// Output channels of the EGR branch per block; empty for the RSM-only variant.
    pub fn egr_channels(&self) -> Vec<usize> {
        let factor = match self.variant {
            NetworkVariant::EgrNet => 2,
            NetworkVariant::EgrNetNoBc => 1,
            NetworkVariant::CnnRsm => return Vec::new(),
        };
        self.blocks
            .iter()
            .map(|b| factor * b.out_channels)
            .collect()
    }

    pub fn classifier_width(&self) -> usize {
        self.rsm_channels().last().copied().unwrap_or(0)
            + self.egr_channels().last().copied().unwrap_or(0)
    }

    /// Trainable parameters: conv kernels and biases, BN scale and shift,
    /// dense weights and bias. Running statistics are not counted.
    pub fn parameter_count(&self) -> usize {
        let branch = |cin: usize, b: &GcbSpec| {
            b.out_channels * cin * b.kernel_size * b.kernel_size + 3 * b.out_channels
        };
        let (mut rsm_in, mut egr_in) = (1, 1);
        let egr = self.egr_channels();
        let mut total = 0;
        for (i, b) in self.blocks.iter().enumerate() {
            total += branch(rsm_in, b);
            rsm_in = b.out_channels;
            if self.variant.uses_egr() {
                total += branch(egr_in, b);
                egr_in = egr[i];
            }
        }
        total + self.classifier_width() * self.num_classes + self.num_classes
    }

    pub fn flops(&self) -> FlopCount {
        let s = self.input_side as u64;
        let mut count = FlopCount {
            input_gram: if self.variant.uses_egr() {
                2 * s * s * s
            } else {
                0
            },
            conv: 0,
            bridge_gram: 0,
            dense: 2 * (self.classifier_width() * self.num_classes) as u64,
        };
        let trace = self.spatial_trace();
        let egr = self.egr_channels();
        let (mut rsm_in, mut egr_in) = (1u64, 1u64);
        for (i, b) in self.blocks.iter().enumerate() {
            let out = trace[i] as u64;
            let (c, k) = (b.out_channels as u64, b.kernel_size as u64);
            count.conv += 2 * c * rsm_in * k * k * out * out;
            rsm_in = c;
            if self.variant.uses_egr() {
                count.conv += 2 * c * egr_in * k * k * out * out;
                egr_in = egr[i] as u64;
            }
            if self.variant.has_bridge() {
                count.bridge_gram += 2 * c * out * out * out;
            }
        }
        count
    }

    pub fn rsm_config(&self) -> RsmConfig {
        RsmConfig {
            m: self.input_side,
            n: self.input_side,
        }
    }
}

/// Convolution plus batch norm of one branch of one block.
#[derive(Debug, Clone, PartialEq)]
pub struct Branch {
    pub conv: ConvParams,
    pub bn: BatchNormState,
}

impl Branch {
    fn init(spec: &GcbSpec, in_channels: usize, seed: u64) -> Result<Self> {
        let k = spec.kernel_size;
        let std = (2.0 / (in_channels * k * k) as f64).sqrt();
        let mut noise = GaussianStream::new(seed);
        let kernels = Tensor::from_fn(&[spec.out_channels, in_channels, k, k], |_| {
            std * noise.next_value()
        });
        Ok(Branch {
            conv: ConvParams::new(
                kernels,
                vec![0.0; spec.out_channels],
                spec.stride,
                Padding::Same,
            )?,
            bn: BatchNormState::new(spec.out_channels),
        })
    }

    fn leaves(&self, tape: &mut Tape) -> Result<[Var; 4]> {
        let c = self.conv.out_channels();
        Ok([
            tape.leaf(self.conv.kernels.clone()),
            tape.leaf(Tensor::new(vec![c], self.conv.bias.clone())?),
            tape.leaf(Tensor::new(vec![c], self.bn.gamma.clone())?),
            tape.leaf(Tensor::new(vec![c], self.bn.beta.clone())?),
        ])
    }

    /// `ReLU(BN(conv(x)))`; also returns the BN node.
    fn forward(&self, tape: &mut Tape, x: Var, vars: &[Var], training: bool) -> Result<(Var, Var)> {
        let conv = tape.conv2d(x, vars[0], vars[1], self.conv.stride, self.conv.padding)?;
        let bn = tape.batchnorm(conv, vars[2], vars[3], &self.bn, training)?;
        Ok((tape.relu(bn)?, bn))
    }

    fn slices_mut(&mut self) -> [&mut [f64]; 4] {
        [
            self.conv.kernels.data_mut(),
            &mut self.conv.bias,
            &mut self.bn.gamma,
            &mut self.bn.beta,
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub spec: GcbSpec,
    pub rsm: Branch,
    /// Absent for the RSM-only variant.
    pub egr: Option<Branch>,
}

/// Outputs of one block on a tape.
#[derive(Debug, Clone)]
pub struct GcbNodes {
    pub x_out: Var,
    pub g_out: Option<Var>,
    pub bn_nodes: Vec<Var>,
}

impl Block {
    fn param_count(&self) -> usize {
        4 * (1 + self.egr.is_some() as usize)
    }

    /// Records the block on `tape`. `vars` holds the branch parameters
    /// as created by [`EgrNetModel::attach`]: RSM kernels, bias, gamma, beta,
    /// then the same for the EGR branch.
    pub fn forward_on(
        &self,
        tape: &mut Tape,
        x: Var,
        g: Option<Var>,
        vars: &[Var],
        variant: NetworkVariant,
        training: bool,
    ) -> Result<GcbNodes> {
        if vars.len() != self.param_count() {
            return Err(Error::shape(
                "gcb_forward",
                format!("{} parameter nodes for {}", vars.len(), self.param_count()),
            ));
        }
        let (x_h, bn_x) = self.rsm.forward(tape, x, &vars[..4], training)?;
        let mut bn_nodes = vec![bn_x];
        let g_out = match (&self.egr, g) {
            (None, _) => None,
            (Some(_), None) => {
                return Err(Error::invalid(
                    "EGR-branch block called without an EGR input",
                ))
            }
            (Some(branch), Some(g)) => {
                let (xs, gs) = (tape.value(x).shape(), tape.value(g).shape());
                if xs[0] != gs[0] || xs[2..] != gs[2..] {
                    return Err(Error::shape(
                        "gcb_forward",
                        format!("branch inputs disagree: RSM {xs:?}, EGR {gs:?}"),
                    ));
                }
                let (g_h, bn_g) = branch.forward(tape, g, &vars[4..], training)?;
                bn_nodes.push(bn_g);
                if variant.has_bridge() {
                    let gram = tape.channel_gram(x_h)?;
                    let xg_h = tape.layernorm(gram)?;
                    Some(tape.concat_channels(g_h, xg_h)?)
                } else {
                    Some(g_h)
                }
            }
        };
        Ok(GcbNodes {
            x_out: x_h,
            g_out,
            bn_nodes,
        })
    }
}

/// Runs one block on concrete tensors. In training mode the block's
/// running statistics are updated.
pub fn gcb_forward(
    x: &Tensor,
    g: Option<&Tensor>,
    block: &mut Block,
    variant: NetworkVariant,
    training: bool,
) -> Result<(Tensor, Option<Tensor>)> {
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let gv = g.map(|g| tape.leaf(g.clone()));
    let mut vars = block.rsm.leaves(&mut tape)?.to_vec();
    if let Some(e) = &block.egr {
        vars.extend(e.leaves(&mut tape)?);
    }
    let nodes = block.forward_on(&mut tape, xv, gv, &vars, variant, training)?;
    if training {
        let stats: Vec<ChannelStats> = nodes
            .bn_nodes
            .iter()
            .filter_map(|&v| tape.batch_stats(v).cloned())
            .collect();
        block.rsm.bn.update_running(&stats[0]);
        if let Some(e) = &mut block.egr {
            e.bn.update_running(&stats[1]);
        }
    }
    Ok((
        tape.value(nodes.x_out).clone(),
        nodes.g_out.map(|v| tape.value(v).clone()),
    ))
}

/// Graph outputs of a full forward pass.
#[derive(Debug, Clone)]
pub struct ForwardNodes {
    pub logits: Var,
    pub features: Var,
    pub bn_nodes: Vec<Var>,
}

/// Preprocessed network input.
#[derive(Debug, Clone, PartialEq)]
pub struct InputBatch {
    /// `B × 1 × S × S`
    pub rsm: Tensor,
    /// `B × 1 × S × S`; absent for the RSM-only variant.
    pub egr: Option<Tensor>,
}

impl InputBatch {
    pub fn len(&self) -> usize {
        self.rsm.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Normalizes each signal, reshapes it to an RSM and, when the variant
/// needs it, forms its EGR.
pub fn prepare_batch(signals: &[&Signal], arch: &Architecture) -> Result<InputBatch> {
    if signals.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let cfg = arch.rsm_config();
    let side = arch.input_side;
    let plane = side * side;
    let mut rsm = Vec::with_capacity(signals.len() * plane);
    let mut egr = Vec::with_capacity(if arch.variant.uses_egr() {
        rsm.capacity()
    } else {
        0
    });
    for s in signals {
        let r = build_rsm(&normalize_sample_with(s, arch.normalization)?, cfg)?;
        if arch.variant.uses_egr() {
            egr.extend_from_slice(gram(&r)?.matrix().as_slice());
        }
        rsm.extend_from_slice(r.matrix().as_slice());
    }
    let shape = vec![signals.len(), 1, side, side];
    Ok(InputBatch {
        rsm: Tensor::new(shape.clone(), rsm)?,
        egr: if arch.variant.uses_egr() {
            Some(Tensor::new(shape, egr)?)
        } else {
            None
        },
    })
}

/// Index of the largest entry of each row; ties go to the lowest index.
pub fn argmax_rows(t: &Tensor) -> Result<Vec<usize>> {
    let (rows, cols) = t.dims2()?;
    Ok((0..rows)
        .map(|r| {
            let row = &t.data()[r * cols..(r + 1) * cols];
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect())
}

/// Loss and accuracy of one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub correct: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EgrNetModel {
    arch: Architecture,
    pub blocks: Vec<Block>,
    /// `num_classes × classifier_width`
    pub classifier_weights: Tensor,
    pub classifier_bias: Vec<f64>,
}

/// Canonical five-block network for 64×64 inputs.
pub fn build_network(
    num_classes: usize,
    variant: NetworkVariant,
    seed: u64,
) -> Result<EgrNetModel> {
    EgrNetModel::new(Architecture::canonical(num_classes, variant), seed)
}

/// Distinct, reproducible seed for parameter group `slot`.
fn slot_seed(seed: u64, slot: u64) -> u64 {
    seed ^ 0x9E37_79B9_7F4A_7C15u64.wrapping_mul(slot + 1)
}

impl EgrNetModel {
    /// He-initialized kernels, zero biases, unit BN scale. Each branch of
    /// each block draws from its own stream, so the RSM branch starts from
    /// the same weights in every variant.
    pub fn new(arch: Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let egr_channels = arch.egr_channels();
        let (mut rsm_in, mut egr_in) = (1, 1);
        let mut blocks = Vec::with_capacity(arch.blocks.len());
        for (i, spec) in arch.blocks.iter().enumerate() {
            let rsm = Branch::init(spec, rsm_in, slot_seed(seed, 2 * i as u64))?;
            rsm_in = spec.out_channels;
            let egr = if arch.variant.uses_egr() {
                let b = Branch::init(spec, egr_in, slot_seed(seed, 2 * i as u64 + 1))?;
                egr_in = egr_channels[i];
                Some(b)
            } else {
                None
            };
            blocks.push(Block {
                spec: *spec,
                rsm,
                egr,
            });
        }
        let width = arch.classifier_width();
        let std = (1.0 / width as f64).sqrt();
        let mut noise = GaussianStream::new(slot_seed(seed, 2 * arch.blocks.len() as u64));
        let classifier_weights =
            Tensor::from_fn(&[arch.num_classes, width], |_| std * noise.next_value());
        let model = EgrNetModel {
            classifier_bias: vec![0.0; arch.num_classes],
            classifier_weights,
            blocks,
            arch,
        };
        model.check_bookkeeping()?;
        Ok(model)
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn variant(&self) -> NetworkVariant {
        self.arch.variant
    }

    pub fn num_classes(&self) -> usize {
        self.arch.num_classes
    }

    /// Cross-checks the stored layers against the architecture's channel table.
    fn check_bookkeeping(&self) -> Result<()> {
        let egr = self.arch.egr_channels();
        let mismatch = |what: String| Err(Error::shape("build_network", what));
        let (mut rsm_in, mut egr_in) = (1, 1);
        for (i, b) in self.blocks.iter().enumerate() {
            if b.rsm.conv.in_channels() != rsm_in
                || b.rsm.conv.out_channels() != b.spec.out_channels
            {
                return mismatch(format!("block {i}: RSM conv channels"));
            }
            rsm_in = b.spec.out_channels;
            match (&b.egr, self.arch.variant.uses_egr()) {
                (Some(e), true) => {
                    if e.conv.in_channels() != egr_in
                        || e.conv.out_channels() != b.spec.out_channels
                    {
                        return mismatch(format!("block {i}: EGR conv channels"));
                    }
                    egr_in = egr[i];
                }
                (None, false) => {}
                _ => return mismatch(format!("block {i}: EGR branch presence")),
            }
        }
        if self.classifier_weights.shape() != [self.arch.num_classes, self.arch.classifier_width()]
            || self.classifier_bias.len() != self.arch.num_classes
        {
            return mismatch(format!(
                "classifier {:?} for width {}",
                self.classifier_weights.shape(),
                self.arch.classifier_width()
            ));
        }
        Ok(())
    }

    pub fn parameter_count(&self) -> usize {
        self.parameter_slices().iter().map(|s| s.len()).sum()
    }

    pub fn flops(&self) -> FlopCount {
        self.arch.flops()
    }

    /// Trainable parameters in tape order.
    fn parameter_slices(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for b in &self.blocks {
            for br in std::iter::once(&b.rsm).chain(&b.egr) {
                out.push(br.conv.kernels.data());
                out.push(&br.conv.bias);
                out.push(&br.bn.gamma);
                out.push(&br.bn.beta);
            }
        }
        out.push(self.classifier_weights.data());
        out.push(&self.classifier_bias);
        out
    }

    fn parameter_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for b in &mut self.blocks {
            out.extend(b.rsm.slices_mut());
            if let Some(e) = &mut b.egr {
                out.extend(e.slices_mut());
            }
        }
        out.push(self.classifier_weights.data_mut());
        out.push(&mut self.classifier_bias);
        out
    }

    /// Fresh optimizer state, one per parameter tensor.
    pub fn adam_states(&self) -> Vec<AdamState> {
        self.parameter_slices()
            .iter()
            .map(|s| AdamState::new(s.len()))
            .collect()
    }

    /// Puts every trainable parameter on `tape` as a leaf.
    pub fn attach(&self, tape: &mut Tape) -> Result<Vec<Var>> {
        let mut vars = Vec::new();
        for b in &self.blocks {
            vars.extend(b.rsm.leaves(tape)?);
            if let Some(e) = &b.egr {
                vars.extend(e.leaves(tape)?);
            }
        }
        vars.push(tape.leaf(self.classifier_weights.clone()));
        vars.push(tape.leaf(Tensor::new(
            vec![self.arch.num_classes],
            self.classifier_bias.clone(),
        )?));
        Ok(vars)
    }

    fn check_input(&self, name: &str, t: &Tensor) -> Result<()> {
        let (_, c, h, w) = t.dims4()?;
        let s = self.arch.input_side;
        if c != 1 || h != s || w != s {
            return Err(Error::shape(
                "forward",
                format!(
                    "{name} batch {:?}, model expects (B, 1, {s}, {s})",
                    t.shape()
                ),
            ));
        }
        Ok(())
    }

    /// Records the whole network on `tape` with parameters `params` from
    /// [`Self::attach`].
    pub fn forward_on(
        &self,
        tape: &mut Tape,
        params: &[Var],
        rsm: Var,
        egr: Option<Var>,
        training: bool,
    ) -> Result<ForwardNodes> {
        self.check_input("RSM", tape.value(rsm))?;
        let variant = self.arch.variant;
        let mut g = match (variant.uses_egr(), egr) {
            (false, _) => None,
            (true, None) => {
                return Err(Error::invalid(format!(
                    "variant {variant} needs an EGR batch"
                )))
            }
            (true, Some(g)) => {
                self.check_input("EGR", tape.value(g))?;
                if tape.value(g).shape() != tape.value(rsm).shape() {
                    return Err(Error::shape(
                        "forward",
                        format!(
                            "RSM batch {:?} and EGR batch {:?} differ",
                            tape.value(rsm).shape(),
                            tape.value(g).shape()
                        ),
                    ));
                }
                Some(if self.arch.normalize_egr_input {
                    tape.layernorm(g)?
                } else {
                    g
                })
            }
        };
        let mut x = rsm;
        let mut bn_nodes = Vec::new();
        let mut offset = 0;
        for b in &self.blocks {
            let n = b.param_count();
            let nodes = b.forward_on(tape, x, g, &params[offset..offset + n], variant, training)?;
            offset += n;
            x = nodes.x_out;
            g = nodes.g_out;
            bn_nodes.extend(nodes.bn_nodes);
        }
        let joined = match g {
            Some(g) => tape.concat_channels(x, g)?,
            None => x,
        };
        let width = tape.value(joined).shape()[1];
        if width != self.arch.classifier_width() {
            return Err(Error::shape(
                "forward",
                format!(
                    "final feature width {width}, classifier expects {}",
                    self.arch.classifier_width()
                ),
            ));
        }
        let features = tape.global_average_pool(joined)?;
        let logits = tape.dense(features, params[offset], params[offset + 1])?;
        Ok(ForwardNodes {
            logits,
            features,
            bn_nodes,
        })
    }

    fn absorb_batch_stats(&mut self, tape: &Tape, nodes: &ForwardNodes) {
        let mut stats = nodes.bn_nodes.iter().filter_map(|&v| tape.batch_stats(v));
        for b in &mut self.blocks {
            for br in std::iter::once(&mut b.rsm).chain(b.egr.as_mut()) {
                if let Some(s) = stats.next() {
                    br.bn.update_running(s);
                }
            }
        }
    }

    fn leaves_for(tape: &mut Tape, batch: &InputBatch) -> (Var, Option<Var>) {
        let rsm = tape.leaf(batch.rsm.clone());
        let egr = batch.egr.as_ref().map(|e| tape.leaf(e.clone()));
        (rsm, egr)
    }

    /// Logits and softmax probabilities. Training mode normalizes with batch
    /// statistics and folds them into the running averages.
    pub fn forward(&mut self, batch: &InputBatch, training: bool) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let params = self.attach(&mut tape)?;
        let (rsm, egr) = Self::leaves_for(&mut tape, batch);
        let nodes = self.forward_on(&mut tape, &params, rsm, egr, training)?;
        if training {
            self.absorb_batch_stats(&tape, &nodes);
        }
        let logits = tape.value(nodes.logits).clone();
        let probs = ops::softmax(&logits)?;
        Ok((logits, probs))
    }

    /// Inference-mode forward pass with frozen weights.
    pub fn infer(&self, batch: &InputBatch) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let params = self.attach(&mut tape)?;
        let (rsm, egr) = Self::leaves_for(&mut tape, batch);
        let nodes = self.forward_on(&mut tape, &params, rsm, egr, false)?;
        let logits = tape.value(nodes.logits).clone();
        let probs = ops::softmax(&logits)?;
        Ok((logits, probs))
    }

    /// Pooled features fed to the classifier, `B × classifier_width`.
    pub fn features(&self, batch: &InputBatch) -> Result<Tensor> {
        let mut tape = Tape::new();
        let params = self.attach(&mut tape)?;
        let (rsm, egr) = Self::leaves_for(&mut tape, batch);
        let nodes = self.forward_on(&mut tape, &params, rsm, egr, false)?;
        Ok(tape.value(nodes.features).clone())
    }

    /// One Adam step on the mean cross-entropy of `batch` against `labels`.
    pub fn train_step(
        &mut self,
        batch: &InputBatch,
        labels: &[usize],
        states: &mut [AdamState],
        lr: f64,
    ) -> Result<StepStats> {
        if labels.len() != batch.len() {
            return Err(Error::shape(
                "train_step",
                format!("{} labels for {} samples", labels.len(), batch.len()),
            ));
        }
        let targets = ops::one_hot(labels, self.arch.num_classes)?;
        let mut tape = Tape::new().with_finite_checks();
        let params = self.attach(&mut tape)?;
        if states.len() != params.len() {
            return Err(Error::shape(
                "train_step",
                format!(
                    "{} optimizer states for {} parameters",
                    states.len(),
                    params.len()
                ),
            ));
        }
        let (rsm, egr) = Self::leaves_for(&mut tape, batch);
        let nodes = self.forward_on(&mut tape, &params, rsm, egr, true)?;
        let predicted = argmax_rows(tape.value(nodes.logits))?;
        let correct = predicted.iter().zip(labels).filter(|(p, l)| p == l).count();
        let loss_node = tape.softmax_cross_entropy(nodes.logits, &targets)?;
        let loss = tape.value(loss_node).data()[0];
        tape.backward(loss_node)?;
        self.absorb_batch_stats(&tape, &nodes);
        let grads: Vec<Vec<f64>> = params
            .iter()
            .map(|&v| {
                tape.take_grad(v)
                    .ok_or_else(|| Error::invalid("parameter without gradient"))
            })
            .collect::<Result<_>>()?;
        drop(tape);
        for ((p, g), s) in self
            .parameter_slices_mut()
            .into_iter()
            .zip(&grads)
            .zip(states)
        {
            adam_step(p, g, s, lr)?;
        }
        Ok(StepStats { loss, correct })
    }

    /// Class labels for raw signals, processed in batches of `batch_size`.
    pub fn predict(&self, signals: &[Signal], cfg: RsmConfig) -> Result<Vec<usize>> {
        if cfg != self.arch.rsm_config() {
            return Err(Error::shape(
                "predict",
                format!(
                    "RSM {}x{}, model expects {s}x{s}",
                    cfg.m,
                    cfg.n,
                    s = self.arch.input_side
                ),
            ));
        }
        let mut out = Vec::with_capacity(signals.len());
        for chunk in signals.chunks(32) {
            let refs: Vec<&Signal> = chunk.iter().collect();
            let (_, probs) = self.infer(&prepare_batch(&refs, &self.arch)?)?;
            out.extend(argmax_rows(&probs)?);
        }
        Ok(out)
    }

    /// Parameters and running statistics by checkpoint name.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let vec1 = |v: &[f64]| Tensor::new(vec![v.len()], v.to_vec()).expect("nonempty");
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            for (tag, br) in
                std::iter::once(("rsm", &b.rsm)).chain(b.egr.as_ref().map(|e| ("egr", e)))
            {
                let p = format!("block{i}.{tag}");
                out.push((format!("{p}.conv.kernels"), br.conv.kernels.clone()));
                out.push((format!("{p}.conv.bias"), vec1(&br.conv.bias)));
                out.push((format!("{p}.bn.gamma"), vec1(&br.bn.gamma)));
                out.push((format!("{p}.bn.beta"), vec1(&br.bn.beta)));
                out.push((format!("{p}.bn.running_mean"), vec1(&br.bn.running_mean)));
                out.push((format!("{p}.bn.running_var"), vec1(&br.bn.running_var)));
            }
        }
        out.push(("classifier.weights".into(), self.classifier_weights.clone()));
        out.push(("classifier.bias".into(), vec1(&self.classifier_bias)));
        out
    }

    fn set_named(&mut self, tensors: Vec<(String, Tensor)>, path: &Path) -> Result<()> {
        let expected = self.named_tensors();
        let format = |detail: String| Error::Format {
            path: path.to_path_buf(),
            detail,
        };
        if tensors.len() != expected.len() {
            return Err(format(format!(
                "{} tensors, architecture needs {}",
                tensors.len(),
                expected.len()
            )));
        }
        for ((name, t), (ename, et)) in tensors.iter().zip(&expected) {
            if name != ename || t.shape() != et.shape() {
                return Err(format(format!(
                    "found {name} {:?}, architecture needs {ename} {:?}",
                    t.shape(),
                    et.shape()
                )));
            }
            if !t.is_finite() {
                return Err(format(format!("{name} holds non-finite values")));
            }
        }
        let mut it = tensors.into_iter().map(|(_, t)| t.into_data());
        let mut next = || it.next().expect("length checked");
        for b in &mut self.blocks {
            for br in std::iter::once(&mut b.rsm).chain(b.egr.as_mut()) {
                br.conv.kernels.data_mut().copy_from_slice(&next());
                br.conv.bias = next();
                br.bn.gamma = next();
                br.bn.beta = next();
                br.bn.running_mean = next();
                br.bn.running_var = next();
            }
        }
        self.classifier_weights.data_mut().copy_from_slice(&next());
        self.classifier_bias = next();
        Ok(())
    }

    /// Path of the architecture document stored next to `checkpoint`.
    pub fn architecture_path(checkpoint: &Path) -> PathBuf {
        checkpoint.with_extension("json")
    }

    /// Writes the binary checkpoint to `checkpoint` and the architecture
    /// JSON next to it.
    pub fn save(&self, checkpoint: &Path) -> Result<()> {
        let arch_path = Self::architecture_path(checkpoint);
        let json = serde_json::to_string_pretty(&self.arch).expect("architecture serializes");
        std::fs::write(&arch_path, json + "\n").map_err(|e| Error::io(&arch_path, e))?;
        write_checkpoint(checkpoint, &self.named_tensors())
    }

    /// Loads a model saved by [`Self::save`], checking the checkpoint's
    /// tensor names and shapes against the architecture document.
    pub fn load(checkpoint: &Path) -> Result<Self> {
        let arch_path = Self::architecture_path(checkpoint);
        let text = std::fs::read_to_string(&arch_path).map_err(|e| Error::io(&arch_path, e))?;
        let arch: Architecture =
            serde_json::from_str(&text).map_err(|e| Error::json(&arch_path, e))?;
        let mut model = EgrNetModel::new(arch, 0)?;
        model.set_named(read_checkpoint(checkpoint)?, checkpoint)?;
        Ok(model)
    }
}
