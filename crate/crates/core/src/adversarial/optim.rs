use crate::detector::nn::Parameters;

/// SGD with momentum and optional L2 weight decay and global-norm clipping.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub max_grad_norm: Option<f64>,
    velocity: Vec<f64>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64, max_grad_norm: Option<f64>) -> Self {
        Self {
            lr,
            momentum,
            weight_decay,
            max_grad_norm,
            velocity: Vec::new(),
        }
    }

    pub fn step<P: Parameters>(&mut self, params: &mut P, grads: &P) {
        let mut g = grads.to_flat();
        if let Some(max) = self.max_grad_norm {
            let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > max {
                let scale = max / norm;
                g.iter_mut().for_each(|v| *v *= scale);
            }
        }
        if self.velocity.len() != g.len() {
            self.velocity = vec![0.0; g.len()];
        }
        let (lr, mu, wd) = (self.lr, self.momentum, self.weight_decay);
        let velocity = &mut self.velocity;
        let mut offset = 0;
        params.visit_mut(&mut |p| {
            for (j, w) in p.iter_mut().enumerate() {
                let i = offset + j;
                let v = mu * velocity[i] + g[i] + wd * *w;
                velocity[i] = v;
                *w -= lr * v;
            }
            offset += p.len();
        });
    }
}
