use super::Network;

/// Momentum SGD with decoupled-from-normalization weight decay (decay only on
/// convolution and linear weights).
#[derive(Clone, Debug)]
pub struct Sgd {
    pub learning_rate: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    velocity: Vec<f32>,
}

impl Sgd {
    pub fn new(learning_rate: f32, momentum: f32, weight_decay: f32) -> Self {
        Self { learning_rate, momentum, weight_decay, velocity: Vec::new() }
    }

    pub fn step(&mut self, net: &mut Network, grads: &mut [f32]) {
        if self.weight_decay != 0.0 {
            let ranges = net.decay_ranges().to_vec();
            let p = net.params();
            for (off, len) in ranges {
                for i in off..off + len {
                    grads[i] += self.weight_decay * p[i];
                }
            }
        }
        if self.velocity.len() != grads.len() {
            self.velocity = vec![0.0; grads.len()];
        }
        let lr = self.learning_rate;
        let mu = self.momentum;
        for ((p, v), g) in net.params_mut().iter_mut().zip(self.velocity.iter_mut()).zip(grads.iter()) {
            *v = mu * *v + g;
            *p -= lr * *v;
        }
    }
}
