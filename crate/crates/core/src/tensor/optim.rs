use super::Parameter;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdConfig {
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
}

/// SGD with a heavy-ball momentum buffer kept on each parameter:
/// `v ← μ·v + g + wd·θ`, `θ ← θ − lr·v`.
///
/// Weight decay skips parameters flagged `requires_l1` (their only shrinkage
/// pressure is the L1 penalty) and those created with `no_decay`.
pub fn optimizer_step<'a>(params: impl IntoIterator<Item = &'a mut Parameter>, cfg: SgdConfig) {
    for p in params {
        let decay = if p.weight_decay && !p.requires_l1 {
            cfg.weight_decay
        } else {
            0.0
        };
        let value = p.value.data_mut();
        let grad = p.grad.data();
        let vel = p.velocity.data_mut();
        for ((v, m), &g) in value.iter_mut().zip(vel.iter_mut()).zip(grad) {
            *m = cfg.momentum * *m + g + decay * *v;
            *v -= cfg.lr * *m;
        }
    }
}
