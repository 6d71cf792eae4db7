//! Exported architecture: per-block alive channels per kernel size, with
//! FLOPs and parameter counts recounted by walking the layers.
//!
//! Text form, one `key = value` per line:
//!
//! ```text
//! network.flops = 1234
//! network.params = 567
//! block[0].kernel3 = 48
//! block[0].skip = false
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{KernelCounts, Supernet, SupernetConfig, KERNEL_SIZES};
use crate::error::{Error, Result};
use crate::tensor::kernels::same_out;

pub const REPORT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockReport {
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    pub input_hw: usize,
    /// Alive channels of kernel 3, 5, 7.
    pub kernels: KernelCounts,
    pub flops: u64,
    pub params: u64,
    pub skip: bool,
}

impl BlockReport {
    pub fn width(&self) -> usize {
        self.kernels.iter().sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchitectureReport {
    pub config: SupernetConfig,
    pub blocks: Vec<BlockReport>,
    pub flops: u64,
    pub params: u64,
}

/// Stem convolution, stem BN, classifier: `(macs, params)`.
fn fixed_layers(cfg: &SupernetConfig) -> (u64, u64) {
    let s = same_out(cfg.input_size, cfg.stem_stride);
    let stem_macs = s * s * cfg.stem_channels * cfg.input_channels * 3 * 3;
    let stem_params = cfg.stem_channels * cfg.input_channels * 9 + 2 * cfg.stem_channels;
    let last = cfg.block_channels.last().copied().unwrap_or(cfg.stem_channels);
    let fc_macs = last * cfg.classes;
    let fc_params = last * cfg.classes + cfg.classes;
    ((stem_macs + fc_macs) as u64, (stem_params + fc_params) as u64)
}

impl ArchitectureReport {
    /// Describes the network `config` would have with the given per-kernel
    /// widths.
    pub fn from_widths(config: &SupernetConfig, widths: &[KernelCounts]) -> Result<Self> {
        config.validate()?;
        let specs = config.block_specs();
        if specs.len() != widths.len() {
            return Err(Error::Config(format!("{} widths for {} blocks", widths.len(), specs.len())));
        }
        let (mut flops, mut params) = fixed_layers(config);
        let mut blocks = Vec::with_capacity(specs.len());
        for (i, ((spec, (h, w)), &kernels)) in specs.iter().zip(widths).enumerate() {
            for (slot, &c) in kernels.iter().enumerate() {
                if c > 0 && !spec.kernel_sizes.contains(&KERNEL_SIZES[slot]) {
                    return Err(Error::Config(format!(
                        "block {i} uses kernel {} outside the kernel set",
                        KERNEL_SIZES[slot]
                    )));
                }
            }
            if kernels.iter().sum::<usize>() == 0 && !spec.has_skip {
                return Err(Error::Config(format!("block {i} has no channels and no skip connection")));
            }
            let (h2, w2) = (same_out(*h, spec.stride), same_out(*w, spec.stride));
            let width: usize = kernels.iter().sum();
            let mut macs = h * w * spec.in_channels * width;
            let mut count = width * spec.in_channels;
            for (slot, &c) in kernels.iter().enumerate() {
                let k = KERNEL_SIZES[slot];
                macs += h2 * w2 * k * k * c;
                count += c * k * k;
            }
            macs += h2 * w2 * width * spec.out_channels;
            count += 2 * width + width * spec.out_channels;
            flops += macs as u64;
            params += count as u64;
            blocks.push(BlockReport {
                in_channels: spec.in_channels,
                out_channels: spec.out_channels,
                stride: spec.stride,
                input_hw: *h,
                kernels,
                flops: macs as u64,
                params: count as u64,
                skip: spec.has_skip,
            });
        }
        Ok(ArchitectureReport {
            config: config.clone(),
            blocks,
            flops,
            params,
        })
    }

    pub fn from_supernet(net: &Supernet) -> Self {
        Self::from_widths(net.config(), &net.kernel_counts()).expect("a built supernet has a valid config")
    }

    pub fn widths(&self) -> Vec<KernelCounts> {
        self.blocks.iter().map(|b| b.kernels).collect()
    }

    /// Per block, the fraction of the block's original channels that are
    /// alive for each kernel size, followed by the dead fraction.
    pub fn kernel_ratios(&self) -> Vec<[f64; 4]> {
        let full = self.config.full_widths();
        self.blocks
            .iter()
            .zip(full)
            .map(|(b, f)| {
                let total: usize = f.iter().sum();
                let t = total.max(1) as f64;
                let alive = b.width();
                [
                    b.kernels[0] as f64 / t,
                    b.kernels[1] as f64 / t,
                    b.kernels[2] as f64 / t,
                    total.saturating_sub(alive) as f64 / t,
                ]
            })
            .collect()
    }

    pub fn to_text(&self) -> String {
        let c = &self.config;
        let join = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let mut s = String::new();
        let _ = writeln!(s, "version = {REPORT_VERSION}");
        let _ = writeln!(s, "network.input_channels = {}", c.input_channels);
        let _ = writeln!(s, "network.input_size = {}", c.input_size);
        let _ = writeln!(s, "network.classes = {}", c.classes);
        let _ = writeln!(s, "network.stem_channels = {}", c.stem_channels);
        let _ = writeln!(s, "network.stem_stride = {}", c.stem_stride);
        let _ = writeln!(s, "network.expansion = {}", c.expansion);
        let _ = writeln!(s, "network.kernel_sizes = {}", join(&c.kernel_sizes));
        let _ = writeln!(s, "network.blocks = {}", self.blocks.len());
        let _ = writeln!(s, "network.flops = {}", self.flops);
        let _ = writeln!(s, "network.params = {}", self.params);
        for (i, b) in self.blocks.iter().enumerate() {
            let _ = writeln!(s, "block[{i}].in_channels = {}", b.in_channels);
            let _ = writeln!(s, "block[{i}].out_channels = {}", b.out_channels);
            let _ = writeln!(s, "block[{i}].stride = {}", b.stride);
            for (slot, k) in KERNEL_SIZES.iter().enumerate() {
                let _ = writeln!(s, "block[{i}].kernel{k} = {}", b.kernels[slot]);
            }
            let _ = writeln!(s, "block[{i}].flops = {}", b.flops);
            let _ = writeln!(s, "block[{i}].skip = {}", b.skip);
        }
        s
    }

    /// Parses [`ArchitectureReport::to_text`] output. Derived fields (FLOPs,
    /// params, skip) are recomputed and must agree with the stored values.
    pub fn parse(text: &str) -> Result<Self> {
        let bad = |m: String| Error::Config(format!("architecture report: {m}"));
        let mut kv = BTreeMap::new();
        for (line_no, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| bad(format!("line {} is not `key = value`", line_no + 1)))?;
            if kv.insert(k.trim().to_string(), v.trim().to_string()).is_some() {
                return Err(bad(format!("duplicate key {}", k.trim())));
            }
        }
        let get = |k: &str| kv.get(k).ok_or_else(|| bad(format!("missing key {k}")));
        let num = |k: &str| -> Result<u64> { get(k)?.parse().map_err(|_| bad(format!("{k} is not a count"))) };
        let us = |k: &str| num(k).map(|v| v as usize);

        let version = num("version")?;
        if version != REPORT_VERSION as u64 {
            return Err(bad(format!("unsupported version {version}")));
        }
        let kernel_sizes = get("network.kernel_sizes")?
            .split(',')
            .map(|t| t.trim().parse::<usize>().map_err(|_| bad("bad kernel list".into())))
            .collect::<Result<Vec<_>>>()?;
        let n_blocks = us("network.blocks")?;
        let mut block_channels = Vec::with_capacity(n_blocks);
        let mut block_strides = Vec::with_capacity(n_blocks);
        let mut widths = Vec::with_capacity(n_blocks);
        for i in 0..n_blocks {
            block_channels.push(us(&format!("block[{i}].out_channels"))?);
            block_strides.push(us(&format!("block[{i}].stride"))?);
            let mut counts = [0; 3];
            for (slot, k) in KERNEL_SIZES.iter().enumerate() {
                counts[slot] = us(&format!("block[{i}].kernel{k}"))?;
            }
            widths.push(counts);
        }
        let config = SupernetConfig {
            input_channels: us("network.input_channels")?,
            input_size: us("network.input_size")?,
            classes: us("network.classes")?,
            stem_channels: us("network.stem_channels")?,
            stem_stride: us("network.stem_stride")?,
            block_channels,
            block_strides,
            expansion: us("network.expansion")?,
            kernel_sizes,
        };
        let report = Self::from_widths(&config, &widths)?;
        for (i, b) in report.blocks.iter().enumerate() {
            if us(&format!("block[{i}].in_channels"))? != b.in_channels {
                return Err(bad(format!("block {i} input channels do not chain")));
            }
            if num(&format!("block[{i}].flops"))? != b.flops {
                return Err(bad(format!("block {i} FLOPs disagree with its widths")));
            }
            let skip = get(&format!("block[{i}].skip"))?;
            if skip != &b.skip.to_string() {
                return Err(bad(format!("block {i} skip flag {skip} is inconsistent")));
            }
        }
        if num("network.flops")? != report.flops || num("network.params")? != report.params {
            return Err(bad("network totals disagree with block widths".into()));
        }
        Ok(report)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let cfg = SupernetConfig::default();
        let mut widths = cfg.full_widths();
        widths[0] = [48, 48, 0];
        widths[3][1] = 7;
        let r = ArchitectureReport::from_widths(&cfg, &widths).unwrap();
        let back = ArchitectureReport::parse(&r.to_text()).unwrap();
        assert_eq!(r, back);
    }

    #[test]
    fn tampered_report_rejected() {
        let r = ArchitectureReport::from_widths(&SupernetConfig::default(), &SupernetConfig::default().full_widths()).unwrap();
        let text = r.to_text().replace("block[2].kernel5 = 120", "block[2].kernel5 = 119");
        assert!(ArchitectureReport::parse(&text).is_err());
        let emptied = r.to_text().replace("block[1].kernel3 = 72", "block[1].kernel3 = 0");
        let emptied = emptied.replace("block[1].kernel5 = 72", "block[1].kernel5 = 0");
        let emptied = emptied.replace("block[1].kernel7 = 72", "block[1].kernel7 = 0");
        assert!(matches!(ArchitectureReport::parse(&emptied), Err(Error::Config(m)) if m.contains("no skip")));
    }

    #[test]
    fn fresh_ratios_are_thirds() {
        let r = ArchitectureReport::from_widths(&SupernetConfig::default(), &SupernetConfig::default().full_widths()).unwrap();
        for ratios in r.kernel_ratios() {
            for &q in &ratios[..3] {
                assert!((q - 1.0 / 3.0).abs() < 1e-12);
            }
            assert_eq!(ratios[3], 0.0);
        }
    }
}
