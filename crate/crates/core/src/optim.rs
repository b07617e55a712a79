//! Adaptive moment estimation over flat parameter slices.

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates for `len` parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub cfg: AdamConfig,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl Adam {
    pub fn new(len: usize) -> Self {
        Self {
            cfg: AdamConfig::default(),
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    /// Advances the shared step counter. Call once per optimizer step before
    /// [`Adam::update`] on each parameter block.
    pub fn tick(&mut self) {
        self.t += 1;
    }

    /// Updates `params` in place with bias-corrected moments.
    /// `offset` selects which slice of the moment buffers `params` maps to.
    pub fn update(&mut self, offset: usize, params: &mut [f64], grads: &[f64], lr: f64) {
        self.update_strided(offset, params, grads, &[lr]);
    }

    /// Like [`Adam::update`] with a periodic learning-rate pattern: parameter
    /// `i` of the block uses `lrs[i % lrs.len()]`.
    pub fn update_strided(
        &mut self,
        offset: usize,
        params: &mut [f64],
        grads: &[f64],
        lrs: &[f64],
    ) {
        assert_eq!(params.len(), grads.len());
        assert!(self.t > 0, "call tick() before update()");
        let AdamConfig { beta1, beta2, eps } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        let m = &mut self.m[offset..offset + params.len()];
        let v = &mut self.v[offset..offset + params.len()];
        for i in 0..params.len() {
            let g = grads[i];
            m[i] = beta1 * m[i] + (1.0 - beta1) * g;
            v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
            params[i] -= lrs[i % lrs.len()] * (m[i] / bc1) / ((v[i] / bc2).sqrt() + eps);
        }
    }

    /// Convenience for a single block covering the whole buffer.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        self.tick();
        self.update(0, params, grads, lr);
    }

    /// Keeps moments for chunks of `chunk` parameters whose flag is set.
    pub fn retain_chunks(&mut self, chunk: usize, keep: &[bool]) {
        assert_eq!(keep.len() * chunk, self.m.len());
        let filter = |buf: &Vec<f64>| -> Vec<f64> {
            buf.chunks_exact(chunk)
                .zip(keep)
                .filter(|(_, &k)| k)
                .flat_map(|(c, _)| c.iter().copied())
                .collect()
        };
        self.m = filter(&self.m);
        self.v = filter(&self.v);
    }
}
