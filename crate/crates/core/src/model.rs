//! The MVANet model: a five-block convolutional base shared by N parallel
//! fully connected classifier branches, fused by concatenation into a final
//! two-way head.
//!
//! Each conv block is convolution -> ReLU -> batch norm, with max pools
//! interleaved after the configured blocks and a terminal average pool.
//! Every branch draws its own dropout masks from its own stream, so one
//! input yields N distinct dropout samples of the shared feature. The loss
//! attaches to the head only; backpropagation splits through the concat
//! into all branches and re-sums at the shared feature.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::layers::{BatchNormLayer, Conv2dLayer, DropoutLayer, LinearLayer};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tape::{conv_out_size, BatchStats, Mode, Tape, VarId};
use crate::tensor::Tensor;

pub use crate::data::Label;

/// Declarative description of the network topology.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSpec {
    pub input_channels: usize,
    pub input_size: usize,
    /// Output channels of each conv block.
    pub base_channels: Vec<usize>,
    pub conv_kernels: Vec<usize>,
    pub conv_strides: Vec<usize>,
    pub conv_pads: Vec<usize>,
    /// 1-based block indices followed by a 3x3 stride-2 max pool.
    pub maxpool_after: Vec<usize>,
    /// Patch size (and stride) of the terminal average pool.
    pub avgpool_k: usize,
    /// Per-branch fully connected widths; every branch must end in 2.
    pub branch_widths: Vec<Vec<usize>>,
    pub dropout_rate: f64,
}

impl NetworkSpec {
    /// Full-size geometry: 224x224 single-channel input, 11x11 stride-4
    /// first filter, three max pools, 6x6 average pool, branches
    /// 2048/1024/2, 1024/512/2, 256/128/2.
    pub fn default_spec() -> Self {
        NetworkSpec {
            input_channels: 1,
            input_size: 224,
            base_channels: vec![64, 192, 384, 256, 256],
            conv_kernels: vec![11, 3, 3, 3, 3],
            conv_strides: vec![4, 1, 1, 1, 1],
            conv_pads: vec![2, 1, 1, 1, 1],
            maxpool_after: vec![1, 2, 5],
            avgpool_k: 6,
            branch_widths: vec![vec![2048, 1024, 2], vec![1024, 512, 2], vec![256, 128, 2]],
            dropout_rate: 0.5,
        }
    }

    /// Desk-scale variant for CPU experiments: 64x64 input, slimmer
    /// channels, stride-2 first conv, 2x2 average pool.
    pub fn small() -> Self {
        NetworkSpec {
            input_channels: 1,
            input_size: 64,
            base_channels: vec![16, 24, 32, 32, 32],
            conv_kernels: vec![11, 3, 3, 3, 3],
            conv_strides: vec![2, 1, 1, 1, 1],
            conv_pads: vec![2, 1, 1, 1, 1],
            maxpool_after: vec![1, 2, 5],
            avgpool_k: 2,
            branch_widths: vec![vec![128, 64, 2], vec![64, 32, 2], vec![32, 16, 2]],
            dropout_rate: 0.5,
        }
    }

    /// Slim 32x32 variant with the full block structure, sized so that a
    /// whole-model finite-difference gradient check over every parameter
    /// stays cheap.
    pub fn small_gradcheck() -> Self {
        NetworkSpec {
            input_channels: 1,
            input_size: 32,
            base_channels: vec![3, 4, 6, 6, 6],
            conv_kernels: vec![11, 3, 3, 3, 3],
            conv_strides: vec![1, 1, 1, 1, 1],
            conv_pads: vec![2, 1, 1, 1, 1],
            maxpool_after: vec![1, 2, 5],
            avgpool_k: 2,
            branch_widths: vec![vec![12, 6, 2], vec![8, 4, 2], vec![6, 4, 2]],
            dropout_rate: 0.5,
        }
    }

    pub fn n_blocks(&self) -> usize {
        self.base_channels.len()
    }

    pub fn n_branches(&self) -> usize {
        self.branch_widths.len()
    }

    /// Width of the concatenated branch outputs (2 per branch).
    pub fn fusion_width(&self) -> usize {
        2 * self.n_branches()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_blocks();
        if n == 0 {
            return Err(Error::InvalidSpec("no conv blocks".into()));
        }
        if self.conv_kernels.len() != n || self.conv_strides.len() != n || self.conv_pads.len() != n
        {
            return Err(Error::InvalidSpec(format!(
                "conv parameter lists must all have {n} entries"
            )));
        }
        if self.input_channels == 0 || self.input_size == 0 {
            return Err(Error::InvalidSpec("input geometry must be positive".into()));
        }
        if self.base_channels.iter().any(|&c| c == 0)
            || self.conv_kernels.iter().any(|&k| k == 0)
            || self.conv_strides.iter().any(|&s| s == 0)
        {
            return Err(Error::InvalidSpec("channels, kernels and strides must be positive".into()));
        }
        if self.maxpool_after.iter().any(|&i| i == 0 || i > n) {
            return Err(Error::InvalidSpec(format!(
                "maxpool_after indices must lie in 1..={n}"
            )));
        }
        if self.avgpool_k == 0 {
            return Err(Error::InvalidSpec("avgpool_k must be positive".into()));
        }
        if self.branch_widths.is_empty() {
            return Err(Error::InvalidSpec("at least one branch required".into()));
        }
        for (i, widths) in self.branch_widths.iter().enumerate() {
            if widths.last() != Some(&2) {
                return Err(Error::InvalidSpec(format!(
                    "branch {} must end in width 2, got {:?}",
                    i + 1,
                    widths
                )));
            }
            if widths.iter().any(|&w| w == 0) {
                return Err(Error::InvalidSpec(format!("branch {} has a zero width", i + 1)));
            }
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::InvalidSpec(format!(
                "dropout rate must lie in [0, 1), got {}",
                self.dropout_rate
            )));
        }
        Ok(())
    }

    /// Spatial size after every stage: input, each conv block, each max
    /// pool, and the average pool. Errors if any stage collapses to zero.
    pub fn shape_chain(&self) -> Result<Vec<usize>> {
        self.validate()?;
        let mut chain = vec![self.input_size];
        let mut s = self.input_size;
        for i in 0..self.n_blocks() {
            s = conv_out_size(s, self.conv_kernels[i], self.conv_strides[i], self.conv_pads[i])
                .filter(|&v| v > 0)
                .ok_or_else(|| {
                    Error::InvalidSpec(format!(
                        "conv block {} yields non-positive spatial size from {}",
                        i + 1,
                        s
                    ))
                })?;
            chain.push(s);
            if self.maxpool_after.contains(&(i + 1)) {
                if s < 3 {
                    return Err(Error::InvalidSpec(format!(
                        "max pool after block {} needs spatial size >= 3, got {s}",
                        i + 1
                    )));
                }
                s = (s - 3) / 2 + 1;
                chain.push(s);
            }
        }
        if s < self.avgpool_k {
            return Err(Error::InvalidSpec(format!(
                "average pool window {} exceeds feature map size {s}",
                self.avgpool_k
            )));
        }
        s = (s - self.avgpool_k) / self.avgpool_k + 1;
        chain.push(s);
        Ok(chain)
    }

    /// Flattened feature width fed to the branches.
    pub fn feature_dim(&self) -> Result<usize> {
        let chain = self.shape_chain()?;
        let sa = *chain.last().unwrap();
        Ok(self.base_channels[self.n_blocks() - 1] * sa * sa)
    }

    // ── flat key=value serialization (config files, checkpoints) ────

    pub fn to_kv(&self) -> Vec<(String, String)> {
        let list = |v: &[usize]| {
            v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
        };
        vec![
            ("input_channels".into(), self.input_channels.to_string()),
            ("input_size".into(), self.input_size.to_string()),
            ("base_channels".into(), list(&self.base_channels)),
            ("conv_kernels".into(), list(&self.conv_kernels)),
            ("conv_strides".into(), list(&self.conv_strides)),
            ("conv_pads".into(), list(&self.conv_pads)),
            ("maxpool_after".into(), list(&self.maxpool_after)),
            ("avgpool_k".into(), self.avgpool_k.to_string()),
            (
                "branch_widths".into(),
                self.branch_widths
                    .iter()
                    .map(|b| list(b))
                    .collect::<Vec<_>>()
                    .join(";"),
            ),
            ("dropout_rate".into(), self.dropout_rate.to_string()),
        ]
    }

    pub fn from_kv(kv: &BTreeMap<String, String>) -> Result<Self> {
        fn get<'a>(kv: &'a BTreeMap<String, String>, key: &str) -> Result<&'a str> {
            kv.get(key)
                .map(String::as_str)
                .ok_or_else(|| Error::InvalidSpec(format!("missing key `{key}`")))
        }
        fn usize_of(key: &str, s: &str) -> Result<usize> {
            s.trim()
                .parse()
                .map_err(|_| Error::InvalidSpec(format!("bad value for `{key}`: {s}")))
        }
        fn list_of(key: &str, s: &str) -> Result<Vec<usize>> {
            s.split(',').map(|p| usize_of(key, p)).collect()
        }
        let spec = NetworkSpec {
            input_channels: usize_of("input_channels", get(kv, "input_channels")?)?,
            input_size: usize_of("input_size", get(kv, "input_size")?)?,
            base_channels: list_of("base_channels", get(kv, "base_channels")?)?,
            conv_kernels: list_of("conv_kernels", get(kv, "conv_kernels")?)?,
            conv_strides: list_of("conv_strides", get(kv, "conv_strides")?)?,
            conv_pads: list_of("conv_pads", get(kv, "conv_pads")?)?,
            maxpool_after: list_of("maxpool_after", get(kv, "maxpool_after")?)?,
            avgpool_k: usize_of("avgpool_k", get(kv, "avgpool_k")?)?,
            branch_widths: get(kv, "branch_widths")?
                .split(';')
                .map(|b| list_of("branch_widths", b))
                .collect::<Result<_>>()?,
            dropout_rate: get(kv, "dropout_rate")?
                .trim()
                .parse()
                .map_err(|_| Error::InvalidSpec("bad value for `dropout_rate`".into()))?,
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Clone)]
pub struct ConvBlock<T: Scalar> {
    pub conv: Conv2dLayer<T>,
    pub bn: BatchNormLayer<T>,
}

#[derive(Debug, Clone)]
pub struct Branch<T: Scalar> {
    pub drop_in: DropoutLayer,
    pub fc1: LinearLayer<T>,
    pub drop_mid: DropoutLayer,
    pub fc2: LinearLayer<T>,
    pub fc3: LinearLayer<T>,
}

/// Dropout masks for one branch (input mask, post-first-FC mask).
#[derive(Debug, Clone)]
pub struct BranchMasks<T: Scalar> {
    pub m_in: Tensor<T>,
    pub m_mid: Tensor<T>,
}

/// Tape handles for every trainable parameter, in canonical order.
#[derive(Debug, Clone)]
pub struct BoundParams {
    vars: Vec<VarId>,
}

impl BoundParams {
    pub fn ordered(&self) -> &[VarId] {
        &self.vars
    }
}

/// Everything a forward pass exposes.
pub struct ForwardOut {
    pub logits: VarId,
    pub branch_logits: Vec<VarId>,
    pub fused: VarId,
    pub base_features: VarId,
    /// Post-batch-norm output of each conv block (before any pool).
    pub block_outputs: Vec<VarId>,
    /// Spatial size after every stage, matching `NetworkSpec::shape_chain`.
    pub stage_spatial: Vec<usize>,
}

/// One prediction: hard decision plus the softmax attack probability.
/// Exactly equal logits resolve to attack.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub label: Label,
    pub attack_score: f64,
}

#[derive(Debug, Clone)]
pub struct Model<T: Scalar> {
    spec: NetworkSpec,
    pub blocks: Vec<ConvBlock<T>>,
    pub branches: Vec<Branch<T>>,
    pub head: LinearLayer<T>,
}

impl<T: Scalar> Model<T> {
    /// Builds and initializes the network: Kaiming-uniform conv/linear
    /// weights, zero biases, identity batch norm, one independent dropout
    /// stream per branch dropout layer. Fully determined by `rng`'s seed.
    pub fn new(spec: NetworkSpec, rng: &mut Rng) -> Result<Self> {
        spec.validate()?;
        spec.shape_chain()?;
        let feature_dim = spec.feature_dim()?;

        let mut blocks = Vec::with_capacity(spec.n_blocks());
        let mut in_c = spec.input_channels;
        for i in 0..spec.n_blocks() {
            let out_c = spec.base_channels[i];
            blocks.push(ConvBlock {
                conv: Conv2dLayer::kaiming(
                    in_c,
                    out_c,
                    spec.conv_kernels[i],
                    spec.conv_strides[i],
                    spec.conv_pads[i],
                    rng,
                ),
                bn: BatchNormLayer::new(out_c),
            });
            in_c = out_c;
        }

        let mut branches = Vec::with_capacity(spec.n_branches());
        for widths in &spec.branch_widths {
            let fc1 = LinearLayer::kaiming(feature_dim, widths[0], rng);
            let fc2 = LinearLayer::kaiming(widths[0], widths[1], rng);
            let fc3 = LinearLayer::kaiming(widths[1], widths[2], rng);
            branches.push(Branch {
                drop_in: DropoutLayer::new(spec.dropout_rate, rng.split())?,
                fc1,
                drop_mid: DropoutLayer::new(spec.dropout_rate, rng.split())?,
                fc2,
                fc3,
            });
        }

        let head = LinearLayer::kaiming(spec.fusion_width(), 2, rng);
        Ok(Model { spec, blocks, branches, head })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    // ── parameter access (canonical order) ───────────────────────────

    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for i in 1..=self.blocks.len() {
            names.push(format!("conv{i}.weight"));
            names.push(format!("conv{i}.bias"));
            names.push(format!("bn{i}.gamma"));
            names.push(format!("bn{i}.beta"));
        }
        for b in 1..=self.branches.len() {
            for fc in 1..=3 {
                names.push(format!("branch{b}.fc{fc}.weight"));
                names.push(format!("branch{b}.fc{fc}.bias"));
            }
        }
        names.push("head.weight".into());
        names.push("head.bias".into());
        names
    }

    pub fn param_tensors(&self) -> Vec<&Tensor<T>> {
        let mut out = Vec::new();
        for blk in &self.blocks {
            out.push(&blk.conv.weight);
            out.push(&blk.conv.bias);
            out.push(&blk.bn.gamma);
            out.push(&blk.bn.beta);
        }
        for br in &self.branches {
            for fc in [&br.fc1, &br.fc2, &br.fc3] {
                out.push(&fc.weight);
                out.push(&fc.bias);
            }
        }
        out.push(&self.head.weight);
        out.push(&self.head.bias);
        out
    }

    pub fn param_tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        for blk in &mut self.blocks {
            out.push(&mut blk.conv.weight);
            out.push(&mut blk.conv.bias);
            out.push(&mut blk.bn.gamma);
            out.push(&mut blk.bn.beta);
        }
        for br in &mut self.branches {
            for fc in [&mut br.fc1, &mut br.fc2, &mut br.fc3] {
                out.push(&mut fc.weight);
                out.push(&mut fc.bias);
            }
        }
        out.push(&mut self.head.weight);
        out.push(&mut self.head.bias);
        out
    }

    pub fn param_count(&self) -> usize {
        self.param_tensors().iter().map(|t| t.numel()).sum()
    }

    /// Model state for checkpoints: trainable parameters plus batch-norm
    /// running statistics, in a fixed order.
    pub fn state_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out: Vec<(String, &Tensor<T>)> = self
            .param_names()
            .into_iter()
            .zip(self.param_tensors())
            .collect();
        for (i, blk) in self.blocks.iter().enumerate() {
            out.push((format!("bn{}.running_mean", i + 1), &blk.bn.running_mean));
            out.push((format!("bn{}.running_var", i + 1), &blk.bn.running_var));
        }
        out
    }

    pub fn state_tensors_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let names = self.param_names();
        let mut out: Vec<(String, &mut Tensor<T>)> = Vec::new();
        let mut running: Vec<(String, &mut Tensor<T>)> = Vec::new();
        for (i, blk) in self.blocks.iter_mut().enumerate() {
            out.push((format!("conv{}.weight", i + 1), &mut blk.conv.weight));
            out.push((format!("conv{}.bias", i + 1), &mut blk.conv.bias));
            out.push((format!("bn{}.gamma", i + 1), &mut blk.bn.gamma));
            out.push((format!("bn{}.beta", i + 1), &mut blk.bn.beta));
            running.push((format!("bn{}.running_mean", i + 1), &mut blk.bn.running_mean));
            running.push((format!("bn{}.running_var", i + 1), &mut blk.bn.running_var));
        }
        for (b, br) in self.branches.iter_mut().enumerate() {
            for (fc, layer) in [&mut br.fc1, &mut br.fc2, &mut br.fc3].into_iter().enumerate() {
                out.push((format!("branch{}.fc{}.weight", b + 1, fc + 1), &mut layer.weight));
                out.push((format!("branch{}.fc{}.bias", b + 1, fc + 1), &mut layer.bias));
            }
        }
        out.push(("head.weight".into(), &mut self.head.weight));
        out.push(("head.bias".into(), &mut self.head.bias));
        debug_assert_eq!(
            out.iter().map(|(n, _)| n.clone()).collect::<Vec<_>>(),
            names
        );
        out.extend(running);
        out
    }

    /// Dropout stream states, for checkpointing.
    pub fn rng_states(&self) -> Vec<(String, u64)> {
        let mut out = Vec::new();
        for (b, br) in self.branches.iter().enumerate() {
            out.push((format!("branch{}.drop_in", b + 1), br.drop_in.rng.state()));
            out.push((format!("branch{}.drop_mid", b + 1), br.drop_mid.rng.state()));
        }
        out
    }

    pub fn set_rng_states(&mut self, states: &BTreeMap<String, u64>) -> Result<()> {
        for (b, br) in self.branches.iter_mut().enumerate() {
            for (name, rng) in [
                (format!("branch{}.drop_in", b + 1), &mut br.drop_in.rng),
                (format!("branch{}.drop_mid", b + 1), &mut br.drop_mid.rng),
            ] {
                let state = states.get(&name).ok_or_else(|| {
                    Error::CorruptCheckpoint(format!("missing rng state `{name}`"))
                })?;
                *rng = Rng::from_state(*state);
            }
        }
        Ok(())
    }

    // ── forward ──────────────────────────────────────────────────────

    /// Registers every trainable parameter on the tape, in canonical order.
    pub fn bind(&self, tape: &mut Tape<T>, requires_grad: bool) -> BoundParams {
        let vars = self
            .param_tensors()
            .into_iter()
            .map(|t| tape.leaf(t.clone(), requires_grad))
            .collect();
        BoundParams { vars }
    }

    /// Wraps caller-supplied leaves (e.g. a gradient checker's) in the
    /// canonical parameter order.
    pub fn bound_from_ordered(&self, vars: &[VarId]) -> Result<BoundParams> {
        let expect = self.param_tensors().len();
        if vars.len() != expect {
            return Err(Error::contract(
                "bound_from_ordered",
                format!("expected {expect} parameter vars, got {}", vars.len()),
            ));
        }
        Ok(BoundParams { vars: vars.to_vec() })
    }

    /// Draws fresh per-branch dropout masks for a batch, advancing each
    /// branch's own streams.
    pub fn draw_branch_masks(&mut self, batch: usize) -> Result<Vec<BranchMasks<T>>> {
        let feat = self.spec.feature_dim()?;
        let widths: Vec<usize> = self.spec.branch_widths.iter().map(|w| w[0]).collect();
        Ok(self
            .branches
            .iter_mut()
            .zip(widths)
            .map(|(br, w1)| BranchMasks {
                m_in: br.drop_in.draw_mask(&[batch, feat]),
                m_mid: br.drop_mid.draw_mask(&[batch, w1]),
            })
            .collect())
    }

    /// Core graph builder. Train mode requires masks and collects batch
    /// statistics instead of touching the layers, so `self` stays shared.
    pub fn build(
        &self,
        tape: &mut Tape<T>,
        bound: &BoundParams,
        x: VarId,
        mode: Mode,
        masks: Option<&[BranchMasks<T>]>,
        mut bn_stats: Option<&mut Vec<BatchStats<T>>>,
    ) -> Result<ForwardOut> {
        let xs = tape.shape(x).to_vec();
        let want = [
            xs.first().copied().unwrap_or(0),
            self.spec.input_channels,
            self.spec.input_size,
            self.spec.input_size,
        ];
        if xs.len() != 4 || xs[1..] != want[1..] || xs[0] == 0 {
            return Err(Error::DimensionMismatch {
                op: "forward",
                lhs: xs,
                rhs: want.to_vec(),
            });
        }
        if mode == Mode::Train && masks.map_or(true, |m| m.len() != self.branches.len()) {
            return Err(Error::contract(
                "forward",
                "train mode requires one mask set per branch",
            ));
        }

        let mut stage_spatial = vec![self.spec.input_size];
        let mut h = x;
        let mut block_outputs = Vec::with_capacity(self.blocks.len());
        let mut v = 0usize; // cursor into bound.vars
        let next = |v: &mut usize| {
            let id = bound.vars[*v];
            *v += 1;
            id
        };

        for (i, blk) in self.blocks.iter().enumerate() {
            let (w, b) = (next(&mut v), next(&mut v));
            let (gamma, beta) = (next(&mut v), next(&mut v));
            h = tape.conv2d(h, w, b, blk.conv.stride, blk.conv.padding)?;
            h = tape.relu(h);
            h = match mode {
                Mode::Train => {
                    let (y, stats) = tape.batchnorm_train(h, gamma, beta, blk.bn.eps)?;
                    if let Some(out) = bn_stats.as_deref_mut() {
                        out.push(stats);
                    }
                    y
                }
                Mode::Eval => tape.batchnorm_eval(
                    h,
                    gamma,
                    beta,
                    &blk.bn.running_mean,
                    &blk.bn.running_var,
                    blk.bn.eps,
                )?,
            };
            block_outputs.push(h);
            stage_spatial.push(tape.shape(h)[2]);
            if self.spec.maxpool_after.contains(&(i + 1)) {
                h = tape.maxpool2d(h, 3, 2)?;
                stage_spatial.push(tape.shape(h)[2]);
            }
        }

        h = tape.avgpool2d(h, self.spec.avgpool_k, self.spec.avgpool_k)?;
        stage_spatial.push(tape.shape(h)[2]);
        let hs = tape.shape(h).to_vec();
        let feat_dim = hs[1] * hs[2] * hs[3];
        let base_features = tape.reshape(h, &[hs[0], feat_dim])?;

        let mut branch_logits = Vec::with_capacity(self.branches.len());
        for (bi, _) in self.branches.iter().enumerate() {
            let mut t = base_features;
            if mode == Mode::Train {
                let m = tape.constant(masks.unwrap()[bi].m_in.clone());
                t = tape.mul(t, m)?;
            }
            let (w1, b1) = (next(&mut v), next(&mut v));
            t = tape.linear(t, w1, b1)?;
            t = tape.relu(t);
            if mode == Mode::Train {
                let m = tape.constant(masks.unwrap()[bi].m_mid.clone());
                t = tape.mul(t, m)?;
            }
            let (w2, b2) = (next(&mut v), next(&mut v));
            t = tape.linear(t, w2, b2)?;
            t = tape.relu(t);
            let (w3, b3) = (next(&mut v), next(&mut v));
            t = tape.linear(t, w3, b3)?;
            branch_logits.push(t);
        }

        let fused = tape.concat(1, &branch_logits)?;
        let (wh, bh) = (next(&mut v), next(&mut v));
        let logits = tape.linear(fused, wh, bh)?;
        debug_assert_eq!(v, bound.vars.len());

        Ok(ForwardOut {
            logits,
            branch_logits,
            fused,
            base_features,
            block_outputs,
            stage_spatial,
        })
    }

    /// Training forward: draws fresh dropout masks, binds parameters as
    /// gradient leaves, and folds batch statistics into the running
    /// batch-norm estimates.
    pub fn forward_train(
        &mut self,
        tape: &mut Tape<T>,
        x: &Tensor<T>,
    ) -> Result<(ForwardOut, BoundParams)> {
        let batch = *x.shape().first().unwrap_or(&0);
        let masks = self.draw_branch_masks(batch)?;
        let bound = self.bind(tape, true);
        let xv = tape.leaf(x.clone(), false);
        let mut stats = Vec::with_capacity(self.blocks.len());
        let out = self.build(tape, &bound, xv, Mode::Train, Some(&masks), Some(&mut stats))?;
        for (blk, st) in self.blocks.iter_mut().zip(&stats) {
            blk.bn.update_running(st);
        }
        Ok((out, bound))
    }

    /// Evaluation forward: no mutation, deterministic, shareable across
    /// threads.
    pub fn forward_eval(&self, tape: &mut Tape<T>, x: &Tensor<T>) -> Result<ForwardOut> {
        let bound = self.bind(tape, false);
        let xv = tape.leaf(x.clone(), false);
        self.build(tape, &bound, xv, Mode::Eval, None, None)
    }

    /// Cross-entropy training loss on the head logits.
    pub fn train_loss(
        &mut self,
        tape: &mut Tape<T>,
        x: &Tensor<T>,
        labels: &[Label],
    ) -> Result<(VarId, ForwardOut, BoundParams)> {
        if labels.is_empty() {
            return Err(Error::contract("train_loss", "empty batch"));
        }
        let (out, bound) = self.forward_train(tape, x)?;
        let idx: Vec<usize> = labels.iter().map(|l| l.index()).collect();
        let loss = tape.softmax_cross_entropy(out.logits, &idx)?;
        Ok((loss, out, bound))
    }

    /// Eval-mode hard decisions with softmax attack scores.
    pub fn predict(&self, x: &Tensor<T>) -> Result<Vec<Prediction>> {
        let mut tape = Tape::new();
        let out = self.forward_eval(&mut tape, x)?;
        Ok(predictions_from_logits(tape.value(out.logits)))
    }
}

/// Argmax with ties resolving to attack; score is the softmax probability
/// of the attack class.
pub fn predictions_from_logits<T: Scalar>(logits: &Tensor<T>) -> Vec<Prediction> {
    let b = logits.shape()[0];
    let mut out = Vec::with_capacity(b);
    for i in 0..b {
        let l0 = logits.data()[i * 2].to_f64_lossy();
        let l1 = logits.data()[i * 2 + 1].to_f64_lossy();
        let m = l0.max(l1);
        let (e0, e1) = ((l0 - m).exp(), (l1 - m).exp());
        let score = e1 / (e0 + e1);
        let label = if l1 >= l0 { Label::Attack } else { Label::Bonafide };
        out.push(Prediction { label, attack_score: score });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_shape_chain_matches_geometry() {
        let chain = NetworkSpec::default_spec().shape_chain().unwrap();
        assert_eq!(chain, vec![224, 55, 27, 27, 13, 13, 13, 13, 6, 1]);
    }

    #[test]
    fn small_and_gradcheck_chains_are_consistent() {
        assert_eq!(
            NetworkSpec::small().shape_chain().unwrap(),
            vec![64, 29, 14, 14, 6, 6, 6, 6, 2, 1]
        );
        assert_eq!(
            NetworkSpec::small_gradcheck().shape_chain().unwrap(),
            vec![32, 26, 12, 12, 5, 5, 5, 5, 2, 1]
        );
        assert_eq!(NetworkSpec::small().feature_dim().unwrap(), 32);
    }

    #[test]
    fn input_63_fails_to_build() {
        let mut spec = NetworkSpec::default_spec();
        spec.input_size = 63;
        let err = Model::<f32>::new(spec, &mut Rng::new(0));
        assert!(matches!(err, Err(Error::InvalidSpec(_))));
    }

    #[test]
    fn default_param_count_is_frozen() {
        // Regression value computed once by an independent shape-walking
        // script over the default geometry.
        let model = Model::<f32>::new(NetworkSpec::default_spec(), &mut Rng::new(0)).unwrap();
        assert_eq!(model.param_count(), 5_774_420);
    }

    #[test]
    fn same_seed_builds_bit_identical_models() {
        let a = Model::<f32>::new(NetworkSpec::small(), &mut Rng::new(3)).unwrap();
        let b = Model::<f32>::new(NetworkSpec::small(), &mut Rng::new(3)).unwrap();
        for (ta, tb) in a.param_tensors().iter().zip(b.param_tensors()) {
            assert_eq!(ta.data(), tb.data());
        }
        assert_eq!(a.rng_states(), b.rng_states());
    }

    #[test]
    fn conv1_weight_shape_is_64_1_11_11() {
        let model = Model::<f32>::new(NetworkSpec::default_spec(), &mut Rng::new(0)).unwrap();
        assert_eq!(model.blocks[0].conv.weight.shape(), &[64, 1, 11, 11]);
    }

    #[test]
    fn spec_kv_round_trip() {
        for spec in [
            NetworkSpec::default_spec(),
            NetworkSpec::small(),
            NetworkSpec::small_gradcheck(),
        ] {
            let kv: BTreeMap<String, String> = spec.to_kv().into_iter().collect();
            let back = NetworkSpec::from_kv(&kv).unwrap();
            assert_eq!(spec, back);
        }
    }

    #[test]
    fn state_tensor_orders_agree() {
        let mut model = Model::<f32>::new(NetworkSpec::small_gradcheck(), &mut Rng::new(1)).unwrap();
        let names: Vec<String> = model.state_tensors().into_iter().map(|(n, _)| n).collect();
        let names_mut: Vec<String> = model
            .state_tensors_mut()
            .into_iter()
            .map(|(n, _)| n)
            .collect();
        assert_eq!(names, names_mut);
        assert_eq!(
            names.len(),
            model.param_names().len() + 2 * model.blocks.len()
        );
    }

    #[test]
    fn predict_examples() {
        let logits = Tensor::new(&[2, 2], vec![2.0f64, -1.0, 0.0, 0.0]).unwrap();
        let preds = predictions_from_logits(&logits);
        assert_eq!(preds[0].label, Label::Bonafide);
        // exact tie resolves to attack
        assert_eq!(preds[1].label, Label::Attack);
        assert!((preds[1].attack_score - 0.5).abs() < 1e-12);
    }

    #[test]
    fn predict_score_is_monotone_in_logit_gap() {
        let base = Tensor::new(&[1, 2], vec![0.4f64, 0.1]).unwrap();
        let bumped = Tensor::new(&[1, 2], vec![0.4f64, 0.6]).unwrap();
        let s0 = predictions_from_logits(&base)[0].attack_score;
        let s1 = predictions_from_logits(&bumped)[0].attack_score;
        assert!(s1 > s0);
    }
}
