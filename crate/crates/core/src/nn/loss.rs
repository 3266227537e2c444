//! Losses over logits. Each returns the mean loss over the batch and the
//! gradient with respect to the logits (already divided by the batch size).

use super::Logits;

fn log_softmax_row(z: &[f32]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
    let lse = z.iter().map(|&v| (v as f64 - m).exp()).sum::<f64>().ln() + m;
    z.iter().map(|&v| v as f64 - lse).collect()
}

pub fn softmax(logits: &Logits) -> Vec<f64> {
    let mut out = Vec::with_capacity(logits.data.len());
    for i in 0..logits.n {
        out.extend(log_softmax_row(logits.row(i)).into_iter().map(f64::exp));
    }
    out
}

/// Mean cross-entropy against integer labels.
pub fn cross_entropy(logits: &Logits, labels: &[usize]) -> (f64, Logits) {
    let n = logits.n as f64;
    let mut loss = 0.0;
    let mut grad = Logits::zeros(logits.n, logits.k);
    for i in 0..logits.n {
        let lp = log_softmax_row(logits.row(i));
        loss -= lp[labels[i]];
        let g = grad.row_mut(i);
        for (j, l) in lp.iter().enumerate() {
            g[j] = ((l.exp() - if j == labels[i] { 1.0 } else { 0.0 }) / n) as f32;
        }
    }
    (loss / n, grad)
}

/// Mean `KL(softmax(p) ‖ softmax(q))` and its gradients with respect to both
/// logit sets.
pub fn kl_divergence(p_logits: &Logits, q_logits: &Logits) -> (f64, Logits, Logits) {
    let n = p_logits.n as f64;
    let mut loss = 0.0;
    let mut gp = Logits::zeros(p_logits.n, p_logits.k);
    let mut gq = Logits::zeros(q_logits.n, q_logits.k);
    for i in 0..p_logits.n {
        let lp = log_softmax_row(p_logits.row(i));
        let lq = log_softmax_row(q_logits.row(i));
        let p: Vec<f64> = lp.iter().map(|v| v.exp()).collect();
        let diff: Vec<f64> = lp.iter().zip(&lq).map(|(a, b)| a - b).collect();
        let kl: f64 = p.iter().zip(&diff).map(|(a, d)| a * d).sum();
        loss += kl;
        let rp = gp.row_mut(i);
        for j in 0..p.len() {
            rp[j] = (p[j] * (diff[j] - kl) / n) as f32;
        }
        let rq = gq.row_mut(i);
        for j in 0..p.len() {
            rq[j] = ((lq[j].exp() - p[j]) / n) as f32;
        }
    }
    (loss / n, gp, gq)
}

/// KL against fixed target probabilities; gradient only for `q_logits`.
pub fn kl_to_target(target: &[f64], q_logits: &Logits) -> (f64, Logits) {
    let n = q_logits.n as f64;
    let k = q_logits.k;
    let mut loss = 0.0;
    let mut gq = Logits::zeros(q_logits.n, k);
    for i in 0..q_logits.n {
        let p = &target[i * k..(i + 1) * k];
        let lq = log_softmax_row(q_logits.row(i));
        for j in 0..k {
            if p[j] > 0.0 {
                loss += p[j] * (p[j].ln() - lq[j]);
            }
        }
        let r = gq.row_mut(i);
        for j in 0..k {
            r[j] = ((lq[j].exp() - p[j]) / n) as f32;
        }
    }
    (loss / n, gq)
}

/// Mean margin `max_{j≠y} z_j − z_y`; positive when the item is misclassified.
pub fn cw_margin(logits: &Logits, labels: &[usize]) -> (f64, Logits) {
    let n = logits.n as f64;
    let mut loss = 0.0;
    let mut grad = Logits::zeros(logits.n, logits.k);
    for i in 0..logits.n {
        let z = logits.row(i);
        let y = labels[i];
        let mut best = usize::MAX;
        for j in 0..z.len() {
            if j != y && (best == usize::MAX || z[j] > z[best]) {
                best = j;
            }
        }
        if best == usize::MAX {
            continue;
        }
        loss += (z[best] - z[y]) as f64;
        let g = grad.row_mut(i);
        g[best] = (1.0 / n) as f32;
        g[y] = (-1.0 / n) as f32;
    }
    (loss / n, grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd_check(f: impl Fn(&Logits) -> f64, at: &Logits, grad: &Logits) {
        for i in 0..at.data.len() {
            let mut a = at.clone();
            a.data[i] += 1e-2;
            let mut b = at.clone();
            b.data[i] -= 1e-2;
            let fd = (f(&a) - f(&b)) / 2e-2;
            assert!((fd - grad.data[i] as f64).abs() < 1e-3, "entry {i}: {fd} vs {}", grad.data[i]);
        }
    }

    fn sample() -> (Logits, Logits) {
        let p = Logits { n: 2, k: 3, data: vec![0.3, -1.0, 2.0, 0.5, 0.1, -0.4] };
        let q = Logits { n: 2, k: 3, data: vec![1.0, 0.2, -0.3, -0.2, 0.9, 0.4] };
        (p, q)
    }

    #[test]
    fn cross_entropy_gradient() {
        let (p, _) = sample();
        let y = [2, 0];
        let (_, g) = cross_entropy(&p, &y);
        fd_check(|l| cross_entropy(l, &y).0, &p, &g);
    }

    #[test]
    fn kl_gradients_and_sign() {
        let (p, q) = sample();
        let (kl, gp, gq) = kl_divergence(&p, &q);
        assert!(kl > 0.0);
        fd_check(|l| kl_divergence(l, &q).0, &p, &gp);
        fd_check(|l| kl_divergence(&p, l).0, &q, &gq);
        let (zero, _, _) = kl_divergence(&p, &p);
        assert!(zero.abs() < 1e-12);
        let target = softmax(&p);
        let (kl2, gq2) = kl_to_target(&target, &q);
        assert!((kl - kl2).abs() < 1e-9);
        assert_eq!(gq, gq2);
    }

    #[test]
    fn cw_margin_gradient() {
        let (p, _) = sample();
        let y = [2, 0];
        let (m, g) = cw_margin(&p, &y);
        assert!((m - ((0.3 - 2.0) + (0.1 - 0.5)) as f64 / 2.0).abs() < 1e-6);
        fd_check(|l| cw_margin(l, &y).0, &p, &g);
    }
}
