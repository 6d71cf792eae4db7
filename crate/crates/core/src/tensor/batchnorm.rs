use super::Tensor;

/// How a batch-norm layer normalises during a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// Batch statistics; running statistics updated by momentum.
    Train,
    /// Running statistics only.
    Eval,
    /// Batch statistics, running statistics untouched; per-channel moments of
    /// the layer input are accumulated for an exact re-estimate.
    Recalibrate,
}

/// Streaming per-channel count/mean/M2, mergeable across shards.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelMoments {
    pub count: u64,
    pub mean: Vec<f64>,
    pub m2: Vec<f64>,
}

impl ChannelMoments {
    pub fn new(channels: usize) -> Self {
        ChannelMoments {
            count: 0,
            mean: vec![0.0; channels],
            m2: vec![0.0; channels],
        }
    }

    /// Two-pass moments of one NCHW batch.
    pub fn from_batch(x: &Tensor) -> Self {
        let [n, c, h, w] = x.shape();
        let hw = h * w;
        let count = (n * hw) as u64;
        let mut mean = vec![0.0f64; c];
        let mut m2 = vec![0.0f64; c];
        for (ch, (mu, m2c)) in mean.iter_mut().zip(m2.iter_mut()).enumerate() {
            let planes = (0..n).map(|s| &x.data()[(s * c + ch) * hw..][..hw]);
            let sum: f64 = planes.clone().flatten().map(|&v| v as f64).sum();
            *mu = if count > 0 { sum / count as f64 } else { 0.0 };
            *m2c = planes.flatten().map(|&v| (v as f64 - *mu).powi(2)).sum();
        }
        ChannelMoments { count, mean, m2 }
    }

    /// Chan et al. pairwise combination.
    pub fn merge(&mut self, other: &ChannelMoments) {
        if other.count == 0 {
            return;
        }
        if self.count == 0 {
            *self = other.clone();
            return;
        }
        let (na, nb) = (self.count as f64, other.count as f64);
        let n = na + nb;
        for c in 0..self.mean.len() {
            let delta = other.mean[c] - self.mean[c];
            self.mean[c] += delta * nb / n;
            self.m2[c] += other.m2[c] + delta * delta * na * nb / n;
        }
        self.count += other.count;
    }

    /// Biased variance.
    pub fn variance(&self) -> Vec<f64> {
        let n = self.count.max(1) as f64;
        self.m2.iter().map(|m| m / n).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState {
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
    pub momentum: f32,
    pub eps: f32,
    pub(crate) accumulator: Option<ChannelMoments>,
}

impl BatchNormState {
    pub fn new(channels: usize) -> Self {
        BatchNormState {
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: 0.1,
            eps: 1e-5,
            accumulator: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }

    /// `running ← (1 − m)·running + m·batch`.
    pub(crate) fn update_running(&mut self, mean: &[f32], var: &[f32]) {
        let m = self.momentum;
        for (r, &b) in self.running_mean.iter_mut().zip(mean) {
            *r = (1.0 - m) * *r + m * b;
        }
        for (r, &b) in self.running_var.iter_mut().zip(var) {
            *r = ((1.0 - m) * *r + m * b).max(0.0);
        }
    }

    pub fn begin_recalibration(&mut self) {
        self.accumulator = Some(ChannelMoments::new(self.channels()));
    }

    /// Replaces running statistics with the accumulated exact moments.
    /// Returns false if nothing was accumulated.
    pub fn finish_recalibration(&mut self) -> bool {
        match self.accumulator.take() {
            Some(m) if m.count > 0 => {
                self.running_mean = m.mean.iter().map(|&v| v as f32).collect();
                self.running_var = m.variance().iter().map(|&v| v.max(0.0) as f32).collect();
                true
            }
            _ => false,
        }
    }

    pub fn select(&mut self, indices: &[usize]) {
        self.running_mean = indices.iter().map(|&i| self.running_mean[i]).collect();
        self.running_var = indices.iter().map(|&i| self.running_var[i]).collect();
        self.accumulator = None;
    }
}
