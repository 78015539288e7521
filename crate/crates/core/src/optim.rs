//! Outer-loop optimization: AdamW with global-norm gradient clipping and a
//! linear-warmup / cosine-decay learning-rate schedule.
//!
//! The optimizer works on one flat `f64` vector covering every meta-learned
//! parameter; the trainer owns the mapping from named buffers to flat
//! offsets. Clipping happens on the concatenated gradient *before* the
//! moment updates, so the moments track the clipped gradient.

/// AdamW hyperparameters. `lr` here is the base rate; the effective rate per
/// step comes from [`lr_schedule`].
#[derive(Debug, Clone, PartialEq)]
pub struct AdamWHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay (applied directly to parameters, not through
    /// the moments).
    pub weight_decay: f64,
    /// Global-norm clip threshold for the concatenated gradient.
    pub clip_norm: f64,
}

impl Default for AdamWHyper {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
            clip_norm: 1.0,
        }
    }
}

/// First/second moment estimates plus the bias-correction step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    /// Completed update count; bias correction uses `t + 1` on the next call.
    pub t: u64,
}

impl Moments {
    pub fn zeros(len: usize) -> Self {
        Self { m: vec![0.0; len], v: vec![0.0; len], t: 0 }
    }

    /// Reset the moment entries for one contiguous span (used when a head
    /// row is recycled: its statistics belong to the dead label).
    pub fn zero_span(&mut self, start: usize, len: usize) {
        self.m[start..start + len].fill(0.0);
        self.v[start..start + len].fill(0.0);
    }
}

/// L2 norm of a flat gradient.
pub fn global_norm(grads: &[f64]) -> f64 {
    grads.iter().map(|g| g * g).sum::<f64>().sqrt()
}

/// Scale `grads` in place so its global norm is at most `clip`. Returns the
/// pre-clip norm (the value worth logging).
pub fn clip_gradient(grads: &mut [f64], clip: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > clip {
        let scale = clip / norm;
        for g in grads.iter_mut() {
            *g *= scale;
        }
    }
    norm
}

/// One AdamW step on the flat parameter vector: clip, update moments with
/// bias correction, apply the update with decoupled weight decay. `lr` is
/// the effective (already scheduled) learning rate. Returns the pre-clip
/// gradient norm.
pub fn adamw_clip_update(
    params: &mut [f64],
    grads: &mut [f64],
    moments: &mut Moments,
    lr: f64,
    h: &AdamWHyper,
) -> f64 {
    assert_eq!(params.len(), grads.len(), "gradient/parameter length mismatch");
    assert_eq!(params.len(), moments.m.len(), "moment/parameter length mismatch");
    let pre_clip_norm = clip_gradient(grads, h.clip_norm);
    moments.t += 1;
    let bc1 = 1.0 - h.beta1.powi(moments.t as i32);
    let bc2 = 1.0 - h.beta2.powi(moments.t as i32);
    for i in 0..params.len() {
        let g = grads[i];
        moments.m[i] = h.beta1 * moments.m[i] + (1.0 - h.beta1) * g;
        moments.v[i] = h.beta2 * moments.v[i] + (1.0 - h.beta2) * g * g;
        let m_hat = moments.m[i] / bc1;
        let v_hat = moments.v[i] / bc2;
        params[i] -= lr * (m_hat / (v_hat.sqrt() + h.eps) + h.weight_decay * params[i]);
    }
    pre_clip_norm
}

/// Linear warmup to `base` over `warmup` steps, then cosine decay to zero at
/// `total`.
pub fn lr_schedule(step: u64, total: u64, warmup: u64, base: f64) -> f64 {
    debug_assert!(warmup <= total && step <= total);
    if step < warmup {
        return base * step as f64 / warmup as f64;
    }
    if total == warmup {
        // Degenerate all-warmup schedule: nothing left to decay over.
        return if step >= total { 0.0 } else { base };
    }
    let progress = (step - warmup) as f64 / (total - warmup) as f64;
    base * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_endpoints_and_junction() {
        let base = 3e-3;
        assert_eq!(lr_schedule(0, 1000, 100, base), 0.0);
        assert!((lr_schedule(100, 1000, 100, base) - base).abs() < 1e-15);
        assert!(lr_schedule(1000, 1000, 100, base).abs() < 1e-12);
        // Cosine midpoint sits at half the base rate.
        assert!((lr_schedule(550, 1000, 100, base) - base / 2.0).abs() < 1e-15);
    }

    #[test]
    fn schedule_warmup_is_linear() {
        let base = 1.0;
        for step in 0..=100u64 {
            let lr = lr_schedule(step, 1000, 100, base);
            assert!((lr - step as f64 / 100.0).abs() < 1e-15);
        }
        // Monotone decay after warmup.
        let mut prev = base + 1.0;
        for step in (100..=1000u64).step_by(50) {
            let lr = lr_schedule(step, 1000, 100, base);
            assert!(lr < prev);
            prev = lr;
        }
    }

    #[test]
    fn zero_grad_zero_decay_is_identity() {
        let mut params = vec![0.7, -1.3, 0.0];
        let mut grads = vec![0.0; 3];
        let mut moments = Moments::zeros(3);
        let h = AdamWHyper { weight_decay: 0.0, ..AdamWHyper::default() };
        adamw_clip_update(&mut params, &mut grads, &mut moments, 0.1, &h);
        assert_eq!(params, vec![0.7, -1.3, 0.0]);
    }

    #[test]
    fn clipping_rescales_to_threshold() {
        let mut grads = vec![6.0, 8.0];
        let norm = clip_gradient(&mut grads, 1.0);
        assert!((norm - 10.0).abs() < 1e-12);
        assert!((grads[0] - 0.6).abs() < 1e-15);
        assert!((grads[1] - 0.8).abs() < 1e-15);
        // Below threshold: untouched.
        let mut small = vec![0.3, -0.4];
        let norm = clip_gradient(&mut small, 1.0);
        assert!((norm - 0.5).abs() < 1e-15);
        assert_eq!(small, vec![0.3, -0.4]);
    }

    #[test]
    fn scalar_recurrence_matches_high_precision_trace() {
        // Frozen from a 50-digit decimal evaluation of the AdamW recurrence
        // with lr=0.01, beta=(0.9, 0.999), eps=1e-8, wd=0.01, x0=0.5 and
        // gradients (0.3, -0.2, 0.1); no clipping.
        let expected = [
            0.48995000033333332222222259259258024691399176953361,
            0.48845580009282633812948784121185222594488495555648,
            0.48562186550341709438530302326634034716990210401370,
        ];
        let mut params = vec![0.5];
        let mut moments = Moments::zeros(1);
        let h = AdamWHyper {
            lr: 0.01,
            weight_decay: 0.01,
            clip_norm: 10.0,
            ..AdamWHyper::default()
        };
        for (step, g) in [0.3, -0.2, 0.1].into_iter().enumerate() {
            let mut grads = vec![g];
            adamw_clip_update(&mut params, &mut grads, &mut moments, h.lr, &h);
            assert!(
                (params[0] - expected[step]).abs() < 1e-12,
                "step {step}: {} vs {}",
                params[0],
                expected[step]
            );
        }
        assert_eq!(moments.t, 3);
    }

    #[test]
    fn clipped_vector_trace_matches_high_precision_trace() {
        // Same oracle construction, two coordinates, first step clipped from
        // norm 10 to 1: lr=0.1, wd=0.1, x0=(1, -2), g1=(6, 8), g2=(0.3, -0.4).
        let expected = [
            [0.89000000166666663888888935185184413580259773662337,
             -2.0799999987500000156249998046875024414062194824223],
            [0.78788203973436125442408281435028308325421186320019,
             -2.0858337023073612316202870222193805460482904677973],
        ];
        let mut params = vec![1.0, -2.0];
        let mut moments = Moments::zeros(2);
        let h = AdamWHyper { lr: 0.1, weight_decay: 0.1, clip_norm: 1.0, ..AdamWHyper::default() };
        for (step, g) in [[6.0, 8.0], [0.3, -0.4]].into_iter().enumerate() {
            let mut grads = g.to_vec();
            adamw_clip_update(&mut params, &mut grads, &mut moments, h.lr, &h);
            for i in 0..2 {
                assert!(
                    (params[i] - expected[step][i]).abs() < 1e-12,
                    "step {step} coord {i}: {} vs {}",
                    params[i],
                    expected[step][i]
                );
            }
        }
    }

    #[test]
    fn zero_span_clears_moments() {
        let mut params = vec![1.0; 6];
        let mut grads = vec![0.5; 6];
        let mut moments = Moments::zeros(6);
        let h = AdamWHyper::default();
        adamw_clip_update(&mut params, &mut grads, &mut moments, 1e-3, &h);
        moments.zero_span(2, 3);
        assert_eq!(&moments.m[2..5], &[0.0; 3]);
        assert_eq!(&moments.v[2..5], &[0.0; 3]);
        assert!(moments.m[0] != 0.0 && moments.m[5] != 0.0);
    }
}
