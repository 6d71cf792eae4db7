//! Reference evaluation of a searchable block as an explicit sum over its
//! atomic blocks. Slow; exists to check the fused path.

use super::Supernet;
use crate::error::{Error, Result};
use crate::tensor::kernels::{depthwise_forward, pointwise_forward, DepthwiseGroup};
use crate::tensor::{BnMode, ChannelMoments, Tensor};

impl Supernet {
    /// Evaluates block `index` one atomic block at a time: expand column →
    /// single-channel depthwise → BN channel → ReLU → project column, summed
    /// over alive atomic blocks, plus the skip path.
    ///
    /// Batch statistics are used unless `mode` is [`BnMode::Eval`]; running
    /// statistics are never modified.
    pub fn forward_block_ensemble(&self, index: usize, x: &Tensor, mode: BnMode) -> Result<Tensor> {
        let block = self
            .blocks()
            .get(index)
            .ok_or_else(|| Error::Index(format!("no searchable block {index}")))?;
        let spec = &block.spec;
        let [n, cin, h, w] = x.shape();
        if cin != spec.in_channels {
            return Err(Error::dim(
                "forward_block_ensemble",
                format!("expects {} input channels, got {cin}", spec.in_channels),
            ));
        }
        let (ho, wo) = block.output_hw_for(h, w);
        let cout = spec.out_channels;
        let mut out = Tensor::zeros([n, cout, ho, wo]);
        if block.atoms.is_empty() && !spec.has_skip {
            return Err(Error::Consistency("skip-less block has no atomic blocks left".into()));
        }

        let params = self.params();
        let expand = &params.get(block.expand).value;
        let project = &params.get(block.project).value;
        let gamma = params.get(block.bn.gamma).value.data();
        let beta = params.get(block.bn.beta).value.data();
        let state = &block.bn.state;
        let width = block.width();

        let mut pos = 0;
        for group in &block.groups {
            let k = group.kernel;
            let dw = params.get(group.weight).value.data();
            for local in 0..group.len {
                let row = expand.select(0, &[pos]);
                let e = pointwise_forward(x, &row);
                let view = DepthwiseGroup {
                    first_channel: 0,
                    channels: 1,
                    kernel: k,
                    weight: &dw[local * k * k..][..k * k],
                };
                let d = depthwise_forward(&e, &[view], spec.stride);
                let (mean, var) = match mode {
                    BnMode::Eval => (state.running_mean[pos], state.running_var[pos]),
                    BnMode::Train | BnMode::Recalibrate => {
                        let m = ChannelMoments::from_batch(&d);
                        (m.mean[0] as f32, m.variance()[0] as f32)
                    }
                };
                let inv_std = 1.0 / (var + state.eps).sqrt();
                let act: Vec<f32> = d
                    .data()
                    .iter()
                    .map(|&v| (gamma[pos] * ((v - mean) * inv_std) + beta[pos]).max(0.0))
                    .collect();
                let od = out.data_mut();
                for s in 0..n {
                    let a = &act[s * ho * wo..][..ho * wo];
                    for o in 0..cout {
                        let wv = project.data()[o * width + pos];
                        let dst = &mut od[(s * cout + o) * ho * wo..][..ho * wo];
                        for (y, &v) in dst.iter_mut().zip(a) {
                            *y += wv * v;
                        }
                    }
                }
                pos += 1;
            }
        }
        if spec.has_skip {
            for (y, &v) in out.data_mut().iter_mut().zip(x.data()) {
                *y += v;
            }
        }
        Ok(out)
    }
}
