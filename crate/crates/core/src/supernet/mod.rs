//! The searchable network: a fixed stem, a chain of expand → mixed-kernel
//! depthwise → project blocks whose expanded channels are atomic blocks, and
//! an average-pool + fully-connected head.
//!
//! The importance factor of an atomic block is the scale γ of the batch norm
//! that follows its depthwise channel.

mod ensemble;
mod report;

pub use report::{ArchitectureReport, BlockReport};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flops::atomic_block_cost;
use crate::tensor::kernels::same_out;
use crate::tensor::{he_normal, BatchNormState, BnMode, ParamId, ParamStore, Parameter, Tape, Tensor, Var};

/// Kernel sizes a searchable block may mix.
pub const KERNEL_SIZES: [usize; 3] = [3, 5, 7];

/// Position of a kernel size inside `[k3, k5, k7]` count arrays.
pub fn kernel_slot(k: usize) -> Option<usize> {
    KERNEL_SIZES.iter().position(|&s| s == k)
}

/// Alive channel counts per kernel size, `[k3, k5, k7]`.
pub type KernelCounts = [usize; 3];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SupernetConfig {
    pub input_channels: usize,
    pub input_size: usize,
    pub classes: usize,
    pub stem_channels: usize,
    pub stem_stride: usize,
    pub block_channels: Vec<usize>,
    pub block_strides: Vec<usize>,
    pub expansion: usize,
    pub kernel_sizes: Vec<usize>,
}

impl Default for SupernetConfig {
    /// Six searchable blocks on 32×32 inputs.
    fn default() -> Self {
        SupernetConfig {
            input_channels: 3,
            input_size: 32,
            classes: 10,
            stem_channels: 8,
            stem_stride: 2,
            block_channels: vec![12, 20, 40, 48, 96, 160],
            block_strides: vec![2, 2, 2, 1, 2, 1],
            expansion: 6,
            kernel_sizes: vec![3, 5, 7],
        }
    }
}

impl SupernetConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.input_channels == 0 || self.input_size == 0 || self.classes == 0 || self.stem_channels == 0 {
            return bad("input channels, input size, classes and stem channels must be positive".into());
        }
        if self.block_channels.len() != self.block_strides.len() {
            return bad(format!(
                "{} block channel counts but {} strides",
                self.block_channels.len(),
                self.block_strides.len()
            ));
        }
        if self.block_channels.iter().any(|&c| c == 0) {
            return bad("block channel counts must be positive".into());
        }
        if let Some(s) = self
            .block_strides
            .iter()
            .chain(std::iter::once(&self.stem_stride))
            .find(|&&s| s != 1 && s != 2)
        {
            return bad(format!("stride {s} not supported (1 or 2)"));
        }
        if self.expansion == 0 {
            return bad("expansion must be positive".into());
        }
        if self.kernel_sizes.is_empty() {
            return bad("kernel set must not be empty".into());
        }
        let mut sorted = self.kernel_sizes.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted != self.kernel_sizes || sorted.iter().any(|&k| kernel_slot(k).is_none()) {
            return bad(format!(
                "kernel sizes {:?} must be ascending, distinct and within {{3,5,7}}",
                self.kernel_sizes
            ));
        }
        Ok(())
    }

    /// Block specs with their input resolution, in network order.
    pub fn block_specs(&self) -> Vec<(SearchableBlockSpec, (usize, usize))> {
        let mut hw = same_out(self.input_size, self.stem_stride);
        let mut cin = self.stem_channels;
        self.block_channels
            .iter()
            .zip(&self.block_strides)
            .map(|(&cout, &stride)| {
                let spec = SearchableBlockSpec::new(cin, cout, stride, self.expansion, self.kernel_sizes.clone());
                let out = ((spec.clone()), (hw, hw));
                cin = cout;
                hw = same_out(hw, stride);
                out
            })
            .collect()
    }

    /// Full per-kernel widths of every block.
    pub fn full_widths(&self) -> Vec<KernelCounts> {
        self.block_specs()
            .iter()
            .map(|(spec, _)| {
                let mut counts = [0; 3];
                for &k in &spec.kernel_sizes {
                    counts[kernel_slot(k).expect("validated")] = spec.expansion * spec.in_channels;
                }
                counts
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchableBlockSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    /// Expanded channels per kernel size, as a multiple of `in_channels`.
    pub expansion: usize,
    pub kernel_sizes: Vec<usize>,
    pub has_skip: bool,
}

impl SearchableBlockSpec {
    pub fn new(in_channels: usize, out_channels: usize, stride: usize, expansion: usize, kernel_sizes: Vec<usize>) -> Self {
        SearchableBlockSpec {
            in_channels,
            out_channels,
            stride,
            expansion,
            kernel_sizes,
            has_skip: stride == 1 && in_channels == out_channels,
        }
    }

    pub fn expanded_channels(&self) -> usize {
        self.kernel_sizes.len() * self.expansion * self.in_channels
    }
}

/// Identity and cost of one prunable path.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AtomicBlockDescriptor {
    pub block_index: usize,
    pub kernel_size: usize,
    /// Index within the block's originally expanded channels.
    pub channel_index: usize,
    /// MACs, `ĉ`.
    pub cost: u64,
    pub alive: bool,
}

#[derive(Clone, Debug)]
pub(crate) struct BnLayer {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub state: BatchNormState,
}

#[derive(Clone, Debug)]
pub(crate) struct KernelGroup {
    pub kernel: usize,
    /// `[len, 1, k, k]`.
    pub weight: ParamId,
    pub len: usize,
}

#[derive(Clone, Debug)]
pub struct SearchableBlock {
    pub spec: SearchableBlockSpec,
    pub input_hw: (usize, usize),
    /// `[C', Cin, 1, 1]`.
    pub(crate) expand: ParamId,
    /// Ascending kernel size; channels of group g follow those of group g−1.
    pub(crate) groups: Vec<KernelGroup>,
    pub(crate) bn: BnLayer,
    /// `[Cout, C', 1, 1]`.
    pub(crate) project: ParamId,
    /// Atom index of each current expanded channel, in channel order.
    pub(crate) atoms: Vec<usize>,
}

impl SearchableBlock {
    pub fn width(&self) -> usize {
        self.atoms.len()
    }

    pub fn output_hw(&self) -> (usize, usize) {
        self.output_hw_for(self.input_hw.0, self.input_hw.1)
    }

    pub fn output_hw_for(&self, h: usize, w: usize) -> (usize, usize) {
        (same_out(h, self.spec.stride), same_out(w, self.spec.stride))
    }

    pub fn kernel_counts(&self) -> KernelCounts {
        let mut counts = [0; 3];
        for g in &self.groups {
            counts[kernel_slot(g.kernel).expect("supported kernel")] += g.len;
        }
        counts
    }

    /// Atom indices of the current channels, in channel order.
    pub fn atom_indices(&self) -> &[usize] {
        &self.atoms
    }

    /// Channel position of an alive atomic block inside this block.
    pub fn position(&self, atom: usize) -> Option<usize> {
        self.atoms.iter().position(|&a| a == atom)
    }

    pub fn expand_id(&self) -> ParamId {
        self.expand
    }

    pub fn project_id(&self) -> ParamId {
        self.project
    }

    /// `(kernel size, depthwise weight, channels)` per kernel group, in
    /// channel order.
    pub fn kernel_groups(&self) -> Vec<(usize, ParamId, usize)> {
        self.groups.iter().map(|g| (g.kernel, g.weight, g.len)).collect()
    }

    pub fn gamma_id(&self) -> ParamId {
        self.bn.gamma
    }

    pub fn beta_id(&self) -> ParamId {
        self.bn.beta
    }

    pub fn bn_state(&self) -> &BatchNormState {
        &self.bn.state
    }

    /// A block with no channels left passes its input through its skip path.
    pub fn is_identity(&self) -> bool {
        self.atoms.is_empty()
    }

    fn forward(&mut self, tape: &mut Tape, params: &ParamStore, x: Var, mode: BnMode) -> Result<Var> {
        let xs = tape.value(x)?.shape();
        if xs[1] != self.spec.in_channels {
            return Err(Error::dim(
                "searchable_block",
                format!("expects {} input channels, got {}", self.spec.in_channels, xs[1]),
            ));
        }
        if self.atoms.is_empty() {
            return if self.spec.has_skip {
                Ok(x)
            } else {
                Err(Error::Consistency("skip-less block has no atomic blocks left".into()))
            };
        }
        let expand = tape.param(params, self.expand);
        let e = tape.pointwise(x, expand)?;
        let weights: Vec<Var> = self
            .groups
            .iter()
            .filter(|g| g.len > 0)
            .map(|g| tape.param(params, g.weight))
            .collect();
        let d = tape.depthwise_mixed(e, &weights, self.spec.stride)?;
        let (gamma, beta) = (tape.param(params, self.bn.gamma), tape.param(params, self.bn.beta));
        let b = tape.batchnorm(d, gamma, beta, &mut self.bn.state, mode)?;
        let r = tape.relu(b)?;
        let project = tape.param(params, self.project);
        let y = tape.pointwise(r, project)?;
        if self.spec.has_skip {
            tape.add(y, x)
        } else {
            Ok(y)
        }
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Stem {
    /// `[C, Cin, 3, 3]`.
    pub conv: ParamId,
    pub stride: usize,
    pub bn: BnLayer,
}

#[derive(Clone, Debug)]
pub(crate) struct Head {
    /// `[classes, C_last, 1, 1]`.
    pub fc_weight: ParamId,
    /// `[classes, 1, 1, 1]`.
    pub fc_bias: ParamId,
}

#[derive(Clone, Debug)]
pub struct Supernet {
    config: SupernetConfig,
    params: ParamStore,
    pub(crate) stem: Stem,
    blocks: Vec<SearchableBlock>,
    pub(crate) head: Head,
    atoms: Vec<AtomicBlockDescriptor>,
}

fn bn_layer(params: &mut ParamStore, channels: usize, importance: bool) -> BnLayer {
    let gamma = Parameter::new(Tensor::full([channels, 1, 1, 1], 1.0));
    let beta = Parameter::new(Tensor::zeros([channels, 1, 1, 1]));
    let (gamma, beta) = if importance {
        (gamma.l1(), beta.l1())
    } else {
        (gamma.no_decay(), beta.no_decay())
    };
    BnLayer {
        gamma: params.push(gamma),
        beta: params.push(beta),
        state: BatchNormState::new(channels),
    }
}

impl Supernet {
    /// Builds the full supernet: every block expands to
    /// `|kernel_sizes|·expansion·in_channels` atomic blocks.
    pub fn build(config: &SupernetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        Self::build_with_widths(config, &config.full_widths(), seed)
    }

    /// Builds a network whose blocks keep `widths[b][slot]` channels of each
    /// kernel size. With full widths this is identical to [`Supernet::build`].
    pub fn build_with_widths(config: &SupernetConfig, widths: &[KernelCounts], seed: u64) -> Result<Self> {
        config.validate()?;
        let specs = config.block_specs();
        if widths.len() != specs.len() {
            return Err(Error::Config(format!(
                "{} block widths for {} blocks",
                widths.len(),
                specs.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();

        let cin = config.input_channels;
        let stem_conv = he_normal([config.stem_channels, cin, 3, 3], cin * 9, &mut rng);
        let stem = Stem {
            conv: params.push(Parameter::new(stem_conv)),
            stride: config.stem_stride,
            bn: bn_layer(&mut params, config.stem_channels, false),
        };

        let mut blocks = Vec::with_capacity(specs.len());
        let mut atoms = Vec::new();
        for (b, ((spec, hw), counts)) in specs.into_iter().zip(widths).enumerate() {
            for (slot, &count) in counts.iter().enumerate() {
                if count > 0 && !spec.kernel_sizes.contains(&KERNEL_SIZES[slot]) {
                    return Err(Error::Config(format!(
                        "block {b} has {count} channels of kernel {} outside the kernel set",
                        KERNEL_SIZES[slot]
                    )));
                }
            }
            let width: usize = counts.iter().sum();
            if width == 0 && !spec.has_skip {
                return Err(Error::Config(format!("block {b} has no channels and no skip connection")));
            }
            let (cin, cout) = (spec.in_channels, spec.out_channels);
            let expand = params.push(Parameter::new(he_normal([width, cin, 1, 1], cin, &mut rng)));
            let mut groups = Vec::new();
            let mut block_atoms = Vec::with_capacity(width);
            for &k in &spec.kernel_sizes {
                let len = counts[kernel_slot(k).expect("validated")];
                let weight = params.push(Parameter::new(he_normal([len, 1, k, k], k * k, &mut rng)));
                let cost = atomic_block_cost(&spec, k, hw);
                for _ in 0..len {
                    block_atoms.push(atoms.len());
                    atoms.push(AtomicBlockDescriptor {
                        block_index: b,
                        kernel_size: k,
                        channel_index: block_atoms.len() - 1,
                        cost,
                        alive: true,
                    });
                }
                groups.push(KernelGroup { kernel: k, weight, len });
            }
            let bn = bn_layer(&mut params, width, true);
            let project = params.push(Parameter::new(he_normal([cout, width, 1, 1], width.max(1), &mut rng)));
            blocks.push(SearchableBlock {
                spec,
                input_hw: hw,
                expand,
                groups,
                bn,
                project,
                atoms: block_atoms,
            });
        }

        let last = config.block_channels.last().copied().unwrap_or(config.stem_channels);
        let fc = Tensor::randn([config.classes, last, 1, 1], (1.0 / last as f32).sqrt(), &mut rng);
        let head = Head {
            fc_weight: params.push(Parameter::new(fc)),
            fc_bias: params.push(Parameter::new(Tensor::zeros([config.classes, 1, 1, 1])).no_decay()),
        };

        Ok(Supernet {
            config: config.clone(),
            params,
            stem,
            blocks,
            head,
            atoms,
        })
    }

    pub fn config(&self) -> &SupernetConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn blocks(&self) -> &[SearchableBlock] {
        &self.blocks
    }

    pub fn block(&self, index: usize) -> &SearchableBlock {
        &self.blocks[index]
    }

    pub fn stem_conv_id(&self) -> ParamId {
        self.stem.conv
    }

    /// Classifier `(weight, bias)`.
    pub fn head_ids(&self) -> (ParamId, ParamId) {
        (self.head.fc_weight, self.head.fc_bias)
    }

    /// Every atomic block of the initial supernet, dead or alive.
    pub fn atoms(&self) -> &[AtomicBlockDescriptor] {
        &self.atoms
    }

    pub fn alive_count(&self) -> usize {
        self.blocks.iter().map(SearchableBlock::width).sum()
    }

    pub fn kernel_counts(&self) -> Vec<KernelCounts> {
        self.blocks.iter().map(SearchableBlock::kernel_counts).collect()
    }

    /// MACs of the stem convolution and the classifier.
    pub fn fixed_cost(&self) -> u64 {
        let cfg = &self.config;
        let stem_out = same_out(cfg.input_size, cfg.stem_stride);
        let stem = (stem_out * stem_out * cfg.stem_channels * cfg.input_channels * 9) as u64;
        let last = cfg.block_channels.last().copied().unwrap_or(cfg.stem_channels);
        stem + (last * cfg.classes) as u64
    }

    /// Current `(γ, offset)` of an alive atomic block.
    pub fn importance(&self, atom: usize) -> Option<(f32, f32)> {
        let desc = self.atoms.get(atom)?;
        if !desc.alive {
            return None;
        }
        let block = &self.blocks[desc.block_index];
        let pos = block.atoms.iter().position(|&a| a == atom)?;
        Some((
            self.params.get(block.bn.gamma).value.data()[pos],
            self.params.get(block.bn.beta).value.data()[pos],
        ))
    }

    /// `(atom, |γ|)` for every alive atomic block, in network channel order.
    pub fn alive_importances(&self) -> Vec<(usize, f32)> {
        let mut out = Vec::with_capacity(self.alive_count());
        for block in &self.blocks {
            let gamma = self.params.get(block.bn.gamma).value.data();
            out.extend(block.atoms.iter().zip(gamma).map(|(&a, g)| (a, g.abs())));
        }
        out
    }

    /// Sets `(γ, offset)` of an alive atomic block.
    pub fn set_importance(&mut self, atom: usize, gamma: f32, offset: f32) -> Result<()> {
        let desc = self
            .atoms
            .get(atom)
            .filter(|d| d.alive)
            .ok_or_else(|| Error::Index(format!("atomic block {atom} is not alive")))?;
        let block = &self.blocks[desc.block_index];
        let pos = block.atoms.iter().position(|&a| a == atom).expect("alive atom is in its block");
        let (g, b) = (block.bn.gamma, block.bn.beta);
        self.params.get_mut(g).value.data_mut()[pos] = gamma;
        self.params.get_mut(b).value.data_mut()[pos] = offset;
        Ok(())
    }

    /// Runs one searchable block with the fused (layer-wise) computation.
    pub fn forward_block(&mut self, index: usize, tape: &mut Tape, x: Var, mode: BnMode) -> Result<Var> {
        let Supernet { params, blocks, .. } = self;
        blocks
            .get_mut(index)
            .ok_or_else(|| Error::Index(format!("no searchable block {index}")))?
            .forward(tape, params, x, mode)
    }

    /// Logits `[N, classes, 1, 1]` for an input batch.
    pub fn forward(&mut self, tape: &mut Tape, input: Tensor, mode: BnMode) -> Result<Var> {
        let cfg = &self.config;
        let s = input.shape();
        if s[1] != cfg.input_channels || s[2] != cfg.input_size || s[3] != cfg.input_size {
            return Err(Error::dim(
                "supernet",
                format!(
                    "expected [N, {}, {}, {}] input, got {s:?}",
                    cfg.input_channels, cfg.input_size, cfg.input_size
                ),
            ));
        }
        let Supernet {
            params,
            stem,
            blocks,
            head,
            ..
        } = self;
        let x = tape.input(input);
        let w = tape.param(params, stem.conv);
        let x = tape.conv2d(x, w, stem.stride)?;
        let (g, b) = (tape.param(params, stem.bn.gamma), tape.param(params, stem.bn.beta));
        let x = tape.batchnorm(x, g, b, &mut stem.bn.state, mode)?;
        let mut x = tape.relu(x)?;
        for block in blocks.iter_mut() {
            x = block.forward(tape, params, x, mode)?;
        }
        let pooled = tape.global_avgpool(x)?;
        let (w, b) = (tape.param(params, head.fc_weight), tape.param(params, head.fc_bias));
        tape.linear(pooled, w, b)
    }

    /// Inference-only logits.
    pub fn predict(&mut self, input: Tensor, mode: BnMode) -> Result<Tensor> {
        let mut tape = Tape::inference();
        let out = self.forward(&mut tape, input, mode)?;
        tape.take_value(out)
    }

    /// Batch-norm states in network order: stem, then each block.
    pub fn bn_states_mut(&mut self) -> impl Iterator<Item = &mut BatchNormState> {
        std::iter::once(&mut self.stem.bn.state).chain(self.blocks.iter_mut().map(|b| &mut b.bn.state))
    }

    pub fn bn_states(&self) -> impl Iterator<Item = &BatchNormState> {
        std::iter::once(&self.stem.bn.state).chain(self.blocks.iter().map(|b| &b.bn.state))
    }

    /// Physically removes atomic blocks: their expand rows, depthwise
    /// channels, batch-norm channels and project columns are sliced away.
    ///
    /// A block that would lose every channel becomes an identity if it has a
    /// skip connection; otherwise its highest-|γ| atomic block is kept.
    /// Returns the atoms actually removed.
    pub fn remove_atomic_blocks(&mut self, ids: &[usize]) -> Result<Vec<usize>> {
        let mut by_block: Vec<Vec<usize>> = vec![Vec::new(); self.blocks.len()];
        for &id in ids {
            let desc = self
                .atoms
                .get(id)
                .ok_or_else(|| Error::Index(format!("atomic block {id} does not exist")))?;
            if !desc.alive {
                return Err(Error::Index(format!("atomic block {id} is already removed")));
            }
            let list = by_block
                .get_mut(desc.block_index)
                .ok_or_else(|| Error::Index(format!("block {} does not exist", desc.block_index)))?;
            if !list.contains(&id) {
                list.push(id);
            }
        }
        let mut removed = Vec::new();
        for (b, mut doomed) in by_block.into_iter().enumerate() {
            if doomed.is_empty() {
                continue;
            }
            let block = &self.blocks[b];
            if !block.spec.has_skip && doomed.len() == block.atoms.len() {
                let gamma = self.params.get(block.bn.gamma).value.data();
                let (keep_pos, _) = gamma
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()).then(b.0.cmp(&a.0)))
                    .expect("non-empty block");
                let keep_atom = block.atoms[keep_pos];
                doomed.retain(|&a| a != keep_atom);
            }
            removed.extend(self.slice_block(b, &doomed));
        }
        removed.sort_unstable();
        Ok(removed)
    }

    fn slice_block(&mut self, b: usize, doomed: &[usize]) -> Vec<usize> {
        let block = &mut self.blocks[b];
        let keep: Vec<usize> = (0..block.atoms.len())
            .filter(|&p| !doomed.contains(&block.atoms[p]))
            .collect();
        let params = &mut self.params;
        params.get_mut(block.expand).select(0, &keep);
        params.get_mut(block.bn.gamma).select(0, &keep);
        params.get_mut(block.bn.beta).select(0, &keep);
        block.bn.state.select(&keep);
        params.get_mut(block.project).select(1, &keep);
        let mut offset = 0;
        for g in &mut block.groups {
            let local: Vec<usize> = keep
                .iter()
                .filter(|&&p| p >= offset && p < offset + g.len)
                .map(|&p| p - offset)
                .collect();
            offset += g.len;
            params.get_mut(g.weight).select(0, &local);
            g.len = local.len();
        }
        let removed: Vec<usize> = block.atoms.iter().copied().filter(|a| doomed.contains(a)).collect();
        block.atoms = keep.iter().map(|&p| block.atoms[p]).collect();
        for &a in &removed {
            self.atoms[a].alive = false;
        }
        removed
    }

    /// Checks that channel counts chain through the network and that every
    /// parameter matches its block's current width.
    pub fn check_consistency(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Consistency(m));
        let mut cin = self.config.stem_channels;
        if self.params.get(self.stem.conv).shape()[0] != cin {
            return fail("stem width".into());
        }
        for (b, block) in self.blocks.iter().enumerate() {
            let w = block.width();
            if block.spec.in_channels != cin {
                return fail(format!("block {b} expects {} inputs, previous emits {cin}", block.spec.in_channels));
            }
            if self.params.get(block.expand).shape() != [w, cin, 1, 1] {
                return fail(format!("block {b} expand shape"));
            }
            if self.params.get(block.project).shape() != [block.spec.out_channels, w, 1, 1] {
                return fail(format!("block {b} project shape"));
            }
            if self.params.get(block.bn.gamma).value.numel() != w || block.bn.state.channels() != w {
                return fail(format!("block {b} batch-norm width"));
            }
            if block.groups.iter().map(|g| g.len).sum::<usize>() != w {
                return fail(format!("block {b} depthwise groups"));
            }
            for g in &block.groups {
                if self.params.get(g.weight).shape() != [g.len, 1, g.kernel, g.kernel] {
                    return fail(format!("block {b} kernel {} weight shape", g.kernel));
                }
            }
            if w == 0 && !block.spec.has_skip {
                return fail(format!("block {b} is empty without skip"));
            }
            for &a in &block.atoms {
                if !self.atoms[a].alive || self.atoms[a].block_index != b {
                    return fail(format!("block {b} lists atom {a} inconsistently"));
                }
            }
            cin = block.spec.out_channels;
        }
        let alive = self.atoms.iter().filter(|a| a.alive).count();
        if alive != self.alive_count() {
            return fail(format!("{alive} alive descriptors but {} channels", self.alive_count()));
        }
        if self.params.get(self.head.fc_weight).shape()[1] != cin {
            return fail("classifier width".into());
        }
        Ok(())
    }

    pub fn export_architecture(&self) -> ArchitectureReport {
        ArchitectureReport::from_supernet(self)
    }

    /// Parameters in checkpoint order: stem, per block (expand, depthwise
    /// groups by ascending kernel, γ, offset, project), classifier.
    pub fn ordered_param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.stem.conv, self.stem.bn.gamma, self.stem.bn.beta];
        for b in &self.blocks {
            ids.push(b.expand);
            ids.extend(b.groups.iter().map(|g| g.weight));
            ids.extend([b.bn.gamma, b.bn.beta, b.project]);
        }
        ids.extend([self.head.fc_weight, self.head.fc_bias]);
        ids
    }
}
