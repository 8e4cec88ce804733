//! Squared-exponential kernel, median-heuristic bandwidth, Monte Carlo kernel
//! mean embedding and the squared MMD (biased V-statistic).

use serde::Serialize;

use crate::error::{check_dim, Error, Result};

/// `κ(θ, θ') = exp(−‖θ − θ'‖² / (2σ²))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SeKernel {
    lengthscale: f64,
}

impl SeKernel {
    pub fn new(lengthscale: f64) -> Result<Self> {
        if !(lengthscale > 0.0) || !lengthscale.is_finite() {
            return Err(Error::Config(format!(
                "kernel lengthscale must be positive and finite, got {lengthscale}"
            )));
        }
        Ok(Self { lengthscale })
    }

    pub fn lengthscale(&self) -> f64 {
        self.lengthscale
    }

    /// Unchecked kernel value.
    #[inline]
    pub fn value(&self, a: &[f64], b: &[f64]) -> f64 {
        (-sq_dist(a, b) / (2.0 * self.lengthscale * self.lengthscale)).exp()
    }

    /// Unchecked `out += scale · ∇₁κ(a, b)`.
    #[inline]
    pub fn add_grad1(&self, a: &[f64], b: &[f64], scale: f64, out: &mut [f64]) {
        let inv = 1.0 / (self.lengthscale * self.lengthscale);
        let k = self.value(a, b);
        let c = -scale * k * inv;
        for ((o, ai), bi) in out.iter_mut().zip(a).zip(b) {
            *o += c * (ai - bi);
        }
    }
}

#[inline]
pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn kernel_eval(k: &SeKernel, a: &[f64], b: &[f64]) -> Result<f64> {
    check_dim(a.len(), b.len())?;
    Ok(k.value(a, b))
}

/// `∇₁κ(a, b) = −((a − b)/σ²) κ(a, b)`.
pub fn kernel_grad1(k: &SeKernel, a: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    check_dim(a.len(), b.len())?;
    let mut out = vec![0.0; a.len()];
    k.add_grad1(a, b, 1.0, &mut out);
    Ok(out)
}

/// Median of the pairwise Euclidean distances `{‖θᵢ − θⱼ‖ : i < j}`; an even
/// number of pairs averages the two middle values.
pub fn median_heuristic(samples: &[Vec<f64>]) -> Result<f64> {
    if samples.len() < 2 {
        return Err(Error::Config(format!(
            "median heuristic needs at least 2 samples, got {}",
            samples.len()
        )));
    }
    let dim = samples[0].len();
    let n = samples.len();
    let mut d = Vec::with_capacity(n * (n - 1) / 2);
    for (i, a) in samples.iter().enumerate() {
        check_dim(dim, a.len())?;
        for b in &samples[i + 1..] {
            d.push(sq_dist(a, b).sqrt());
        }
    }
    let m = d.len();
    let mid = m / 2;
    let (_, upper, _) = d.select_nth_unstable_by(mid, f64::total_cmp);
    let upper = *upper;
    let median = if m % 2 == 1 {
        upper
    } else {
        // The lower middle value is the largest element left of `mid`.
        let lower = d[..mid].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lower + upper)
    };
    if !(median > 0.0) {
        return Err(Error::Config("median pairwise distance is zero".into()));
    }
    Ok(median)
}

/// `μ̂_P(θ) = (1/M) Σᵢ κ(θ, θᵢ)` over a frozen anchor set drawn from `P`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MeanEmbedding {
    kernel: SeKernel,
    anchors: Vec<Vec<f64>>,
}

impl MeanEmbedding {
    pub fn new(kernel: SeKernel, anchors: Vec<Vec<f64>>) -> Result<Self> {
        let first = anchors.first().ok_or(Error::EmptyInput("embedding anchors"))?;
        let dim = first.len();
        for a in &anchors {
            check_dim(dim, a.len())?;
        }
        Ok(Self { kernel, anchors })
    }

    pub fn kernel(&self) -> &SeKernel {
        &self.kernel
    }

    pub fn anchors(&self) -> &[Vec<f64>] {
        &self.anchors
    }

    pub fn dim(&self) -> usize {
        self.anchors[0].len()
    }

    pub(crate) fn value(&self, theta: &[f64]) -> f64 {
        let s: f64 = self.anchors.iter().map(|a| self.kernel.value(theta, a)).sum();
        s / self.anchors.len() as f64
    }

    /// Unchecked `out += scale · ∇μ̂_P(θ)`.
    pub(crate) fn add_grad(&self, theta: &[f64], scale: f64, out: &mut [f64]) {
        let w = scale / self.anchors.len() as f64;
        for a in &self.anchors {
            self.kernel.add_grad1(theta, a, w, out);
        }
    }
}

pub fn mean_embedding_eval(m: &MeanEmbedding, theta: &[f64]) -> Result<f64> {
    check_dim(m.dim(), theta.len())?;
    Ok(m.value(theta))
}

pub fn mean_embedding_grad(m: &MeanEmbedding, theta: &[f64]) -> Result<Vec<f64>> {
    check_dim(m.dim(), theta.len())?;
    let mut out = vec![0.0; theta.len()];
    m.add_grad(theta, 1.0, &mut out);
    Ok(out)
}

/// Biased (V-statistic) squared MMD between two samples, diagonal terms
/// included.
pub fn mmd_squared(k: &SeKernel, x: &[Vec<f64>], y: &[Vec<f64>]) -> Result<f64> {
    if x.is_empty() || y.is_empty() {
        return Err(Error::EmptyInput("mmd sample"));
    }
    let dim = x[0].len();
    for v in x.iter().chain(y) {
        check_dim(dim, v.len())?;
    }
    let xx = self_similarity(k, x);
    let yy = self_similarity(k, y);
    let mut xy = 0.0;
    for a in x {
        for b in y {
            xy += k.value(a, b);
        }
    }
    xy /= (x.len() * y.len()) as f64;
    Ok(xx - 2.0 * xy + yy)
}

/// Mean of κ over `s × s`, using symmetry and `κ(θ, θ) = 1`.
fn self_similarity(k: &SeKernel, s: &[Vec<f64>]) -> f64 {
    let mut off = 0.0;
    for (i, a) in s.iter().enumerate() {
        for b in &s[i + 1..] {
            off += k.value(a, b);
        }
    }
    let n = s.len() as f64;
    (n + 2.0 * off) / (n * n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian_cloud(n: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect())
            .collect()
    }

    fn fd_grad(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
        let mut p = x.to_vec();
        (0..x.len())
            .map(|i| {
                p[i] = x[i] + h;
                let up = f(&p);
                p[i] = x[i] - h;
                let down = f(&p);
                p[i] = x[i];
                (up - down) / (2.0 * h)
            })
            .collect()
    }

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-8))
            .fold(0.0, f64::max)
    }

    #[test]
    fn kernel_values() {
        let k = SeKernel::new(0.7).unwrap();
        assert_eq!(kernel_eval(&k, &[1.0, 2.0], &[1.0, 2.0]).unwrap(), 1.0);
        let v = kernel_eval(&k, &[0.0], &[0.7 * 2f64.sqrt()]).unwrap();
        assert!((v - (-1.0f64).exp()).abs() < 1e-15);
        let wide = SeKernel::new(1e8).unwrap();
        assert!((kernel_eval(&wide, &[3.0, -4.0], &[-10.0, 2.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!(kernel_eval(&k, &[0.0], &[0.0, 1.0]).is_err());
        assert!(SeKernel::new(0.0).is_err());
    }

    #[test]
    fn kernel_gradient_examples() {
        let k = SeKernel::new(1.0).unwrap();
        assert_eq!(kernel_grad1(&k, &[0.4, -0.1], &[0.4, -0.1]).unwrap(), vec![0.0, 0.0]);
        let g = kernel_grad1(&k, &[1.0], &[0.0]).unwrap();
        assert!((g[0] + (-0.5f64).exp()).abs() < 1e-15);
        assert!((g[0] + 0.606531).abs() < 1e-6);
    }

    #[test]
    fn kernel_gradient_matches_finite_differences() {
        let k = SeKernel::new(1.3).unwrap();
        let pts = gaussian_cloud(40, 3, 8);
        for pair in pts.chunks(2) {
            let (a, b) = (&pair[0], &pair[1]);
            let g = kernel_grad1(&k, a, b).unwrap();
            let fd = fd_grad(|x| k.value(x, b), a, 1e-5);
            assert!(rel_err(&g, &fd) < 1e-6);
        }
    }

    /// Sort-based median, written independently of the selection path.
    fn brute_median(s: &[Vec<f64>]) -> f64 {
        let mut d = Vec::new();
        for i in 0..s.len() {
            for j in 0..s.len() {
                if i < j {
                    let mut acc = 0.0;
                    for c in 0..s[i].len() {
                        acc += (s[i][c] - s[j][c]).powi(2);
                    }
                    d.push(acc.sqrt());
                }
            }
        }
        d.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let m = d.len();
        if m % 2 == 1 {
            d[m / 2]
        } else {
            0.5 * (d[m / 2 - 1] + d[m / 2])
        }
    }

    #[test]
    fn median_heuristic_examples() {
        assert_eq!(median_heuristic(&[vec![0.0], vec![1.0], vec![3.0]]).unwrap(), 2.0);
        assert_eq!(median_heuristic(&[vec![0.0], vec![1.0]]).unwrap(), 1.0);
        // four points, six distances {1,2,3,1,2,1} → middle pair (1, 2)
        assert_eq!(
            median_heuristic(&[vec![0.0], vec![1.0], vec![2.0], vec![3.0]]).unwrap(),
            1.5
        );
        let cloud = gaussian_cloud(500, 2, 1);
        assert_eq!(median_heuristic(&cloud).unwrap(), brute_median(&cloud));
    }

    #[test]
    fn median_heuristic_errors() {
        assert!(median_heuristic(&[vec![1.0]]).is_err());
        assert!(median_heuristic(&[vec![1.0], vec![1.0], vec![1.0]]).is_err());
    }

    #[test]
    fn mean_embedding_examples() {
        let k = SeKernel::new(0.8).unwrap();
        let theta0 = vec![0.3, -1.0];
        let m = MeanEmbedding::new(k, vec![theta0.clone(); 5]).unwrap();
        let theta = vec![1.0, 0.5];
        assert!((mean_embedding_eval(&m, &theta).unwrap() - k.value(&theta, &theta0)).abs() < 1e-15);
        let single = MeanEmbedding::new(k, vec![theta.clone()]).unwrap();
        assert_eq!(mean_embedding_eval(&single, &theta).unwrap(), 1.0);
        assert_eq!(mean_embedding_grad(&single, &theta).unwrap(), vec![0.0, 0.0]);

        let anchors = gaussian_cloud(20, 2, 4);
        let m = MeanEmbedding::new(k, anchors.clone()).unwrap();
        let mut acc = 0.0;
        for a in &anchors {
            acc += (-((a[0]).powi(2) + (a[1]).powi(2)) / (2.0 * 0.64)).exp();
        }
        assert!((mean_embedding_eval(&m, &[0.0, 0.0]).unwrap() - acc / 20.0).abs() < 1e-12);
        assert!(MeanEmbedding::new(k, vec![]).is_err());
        assert!(mean_embedding_eval(&m, &[0.0]).is_err());
    }

    #[test]
    fn mean_embedding_gradient() {
        let k = SeKernel::new(1.1).unwrap();
        let sym = MeanEmbedding::new(k, vec![vec![2.0 - 0.7], vec![2.0 + 0.7]]).unwrap();
        assert!(mean_embedding_grad(&sym, &[2.0]).unwrap()[0].abs() < 1e-16);
        let m = MeanEmbedding::new(k, gaussian_cloud(20, 3, 6)).unwrap();
        for theta in gaussian_cloud(20, 3, 7) {
            let g = mean_embedding_grad(&m, &theta).unwrap();
            let fd = fd_grad(|x| m.value(x), &theta, 1e-5);
            assert!(rel_err(&g, &fd) < 1e-6);
        }
    }

    fn naive_mmd(k: &SeKernel, x: &[Vec<f64>], y: &[Vec<f64>]) -> f64 {
        let mean = |a: &[Vec<f64>], b: &[Vec<f64>]| {
            let mut s = 0.0;
            for u in a {
                for v in b {
                    s += k.value(u, v);
                }
            }
            s / (a.len() * b.len()) as f64
        };
        mean(x, x) - 2.0 * mean(x, y) + mean(y, y)
    }

    #[test]
    fn mmd_examples() {
        let k = SeKernel::new(1.0).unwrap();
        let x = gaussian_cloud(30, 2, 2);
        assert!(mmd_squared(&k, &x, &x).unwrap().abs() < 1e-12);
        let a = vec![0.5, 1.0];
        let b = vec![-0.2, 0.1];
        let expect = 2.0 * (1.0 - k.value(&a, &b));
        assert!((mmd_squared(&k, &[a], &[b]).unwrap() - expect).abs() < 1e-15);
        let y = gaussian_cloud(40, 2, 3);
        assert!((mmd_squared(&k, &x, &y).unwrap() - naive_mmd(&k, &x, &y)).abs() < 1e-12);
        assert!(mmd_squared(&k, &[], &y).is_err());
    }

    #[test]
    fn cross_term_is_mean_embedding() {
        let k = SeKernel::new(0.9).unwrap();
        let anchors = gaussian_cloud(20, 2, 12);
        let m = MeanEmbedding::new(k, anchors.clone()).unwrap();
        let theta = vec![0.4, -0.3];
        let cross: f64 = anchors.iter().map(|a| k.value(&theta, a)).sum::<f64>() / 20.0;
        assert!((cross - mean_embedding_eval(&m, &theta).unwrap()).abs() < 1e-15);
    }

    fn cloud_strategy(max: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
        prop::collection::vec(prop::collection::vec(-4.0f64..4.0, 2), 2..max)
    }

    proptest! {
        #[test]
        fn kernel_is_symmetric(a in prop::collection::vec(-5.0f64..5.0, 3),
                               b in prop::collection::vec(-5.0f64..5.0, 3),
                               s in 0.1f64..5.0) {
            let k = SeKernel::new(s).unwrap();
            prop_assert_eq!(k.value(&a, &b), k.value(&b, &a));
            prop_assert!(k.value(&a, &b) <= 1.0 && k.value(&a, &b) >= 0.0);
        }

        #[test]
        fn mmd_symmetry_and_permutation(x in cloud_strategy(12), y in cloud_strategy(12), s in 0.2f64..3.0) {
            let k = SeKernel::new(s).unwrap();
            let xy = mmd_squared(&k, &x, &y).unwrap();
            let yx = mmd_squared(&k, &y, &x).unwrap();
            prop_assert!((xy - yx).abs() < 1e-12);
            prop_assert!(xy > -1e-12);
            let mut xr = x.clone();
            xr.reverse();
            let mut yr = y.clone();
            yr.rotate_left(1);
            prop_assert!((mmd_squared(&k, &xr, &yr).unwrap() - xy).abs() < 1e-12);
        }

        #[test]
        fn median_is_translation_invariant(x in cloud_strategy(20), shift in prop::collection::vec(-3.0f64..3.0, 2)) {
            let Ok(base) = median_heuristic(&x) else { return Ok(()); };
            let moved: Vec<Vec<f64>> = x.iter().map(|p| vec![p[0] + shift[0], p[1] + shift[1]]).collect();
            let m = median_heuristic(&moved).unwrap();
            prop_assert!((m - base).abs() < 1e-9 * base.max(1.0));
        }
    }
}
