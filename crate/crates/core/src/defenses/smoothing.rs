//! Spatial smoothers. All use reflect padding (the border pixel is not
//! repeated), so a `k×k` window needs `k ≤ min(H, W)`.

use super::{check_upstream, image_dims, Preprocessor};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let r = if i < 0 {
        -i
    } else if i >= n {
        2 * (n - 1) - i
    } else {
        i
    };
    r as usize
}

fn check_kernel(op: &str, k: usize) -> Result<()> {
    if k == 0 || k.is_multiple_of(2) {
        return Err(Error::contract(format!("{op} kernel size must be odd, got {k}")));
    }
    Ok(())
}

fn check_fits(op: &'static str, x: &Tensor, k: usize) -> Result<(usize, usize, usize, usize)> {
    let dims = image_dims(op, x)?;
    if k > dims.2.min(dims.3) {
        return Err(Error::contract(format!(
            "{op} kernel {k} larger than image {}×{}",
            dims.2, dims.3
        )));
    }
    Ok(dims)
}

/// Calls `f(out_index, window)` for every output pixel, where `window` lists
/// the flat source index of each kernel tap in row-major kernel order.
fn for_each_window(
    (n, c, h, w): (usize, usize, usize, usize),
    k: usize,
    mut f: impl FnMut(usize, &[usize]),
) {
    let pad = (k / 2) as isize;
    let mut window = vec![0; k * k];
    for plane in 0..n * c {
        let base = plane * h * w;
        for i in 0..h {
            for j in 0..w {
                for a in 0..k {
                    let r = reflect(i as isize + a as isize - pad, h);
                    for b in 0..k {
                        let s = reflect(j as isize + b as isize - pad, w);
                        window[a * k + b] = base + r * w + s;
                    }
                }
                f(base + i * w + j, &window);
            }
        }
    }
}

/// Per-channel sliding-window median.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MedianSmooth {
    k: usize,
}

impl MedianSmooth {
    pub fn new(k: usize) -> Result<Self> {
        check_kernel("median", k)?;
        Ok(MedianSmooth { k })
    }

    /// Calls `f(out_index, source_index)` with the source pixel each output
    /// copies. Ties are broken by the lower source index.
    fn medians(&self, x: &Tensor, mut f: impl FnMut(usize, usize)) -> Result<()> {
        let dims = check_fits("median_smooth_2d", x, self.k)?;
        let data = x.data();
        let mid = self.k * self.k / 2;
        let mut buf = Vec::with_capacity(self.k * self.k);
        for_each_window(dims, self.k, |out, window| {
            buf.clear();
            buf.extend_from_slice(window);
            buf.select_nth_unstable_by(mid, |&a, &b| data[a].total_cmp(&data[b]).then(a.cmp(&b)));
            f(out, buf[mid]);
        });
        Ok(())
    }
}

impl Preprocessor for MedianSmooth {
    fn describe(&self) -> String {
        format!("median:{}", self.k)
    }

    fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let mut out = vec![0.0; x.numel()];
        self.medians(x, |o, s| out[o] = x.data()[s])?;
        Tensor::new(x.shape().to_vec(), out)
    }

    /// Each output is a copy of one input pixel, so the gradient routes there.
    fn vjp(&self, input: &Tensor, _output: &Tensor, upstream: &Tensor) -> Result<Tensor> {
        check_upstream("median_vjp", input, upstream)?;
        let mut g = vec![0.0; input.numel()];
        self.medians(input, |o, s| g[s] += upstream.data()[o])?;
        Tensor::new(input.shape().to_vec(), g)
    }

    fn is_differentiable(&self) -> bool {
        true
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SmoothKind {
    Conv,
    Average,
    Gaussian { sigma: f64 },
}

/// Per-channel 2-D cross-correlation with a fixed `k×k` kernel.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearSmooth {
    kind: SmoothKind,
    kernel: Tensor,
}

impl LinearSmooth {
    /// Uses `kernel` verbatim. To keep outputs in `[0, 1]` its entries must be
    /// non-negative and sum to at most 1.
    pub fn conv(kernel: Tensor) -> Result<Self> {
        let k = match *kernel.shape() {
            [a, b] if a == b => a,
            _ => return Err(Error::contract(format!("conv kernel must be square, got {:?}", kernel.shape()))),
        };
        check_kernel("conv", k)?;
        if kernel.data().iter().any(|v| !(*v >= 0.0)) || kernel.sum() > 1.0 + 1e-12 {
            return Err(Error::contract("conv kernel must be non-negative with sum at most 1"));
        }
        Ok(LinearSmooth {
            kind: SmoothKind::Conv,
            kernel,
        })
    }

    pub fn average(k: usize) -> Result<Self> {
        check_kernel("average", k)?;
        Ok(LinearSmooth {
            kind: SmoothKind::Average,
            kernel: Tensor::full(vec![k, k], 1.0 / (k * k) as f64),
        })
    }

    pub fn gaussian(k: usize, sigma: f64) -> Result<Self> {
        check_kernel("gaussian", k)?;
        if !(sigma.is_finite() && sigma > 0.0) {
            return Err(Error::contract(format!("gaussian sigma must be positive, got {sigma}")));
        }
        let p = (k / 2) as f64;
        let raw: Vec<f64> = (0..k * k)
            .map(|i| {
                let (a, b) = ((i / k) as f64 - p, (i % k) as f64 - p);
                (-(a * a + b * b) / (2.0 * sigma * sigma)).exp()
            })
            .collect();
        let total: f64 = raw.iter().sum();
        Ok(LinearSmooth {
            kind: SmoothKind::Gaussian { sigma },
            kernel: Tensor::new(vec![k, k], raw.into_iter().map(|v| v / total).collect())?,
        })
    }

    pub fn kernel(&self) -> &Tensor {
        &self.kernel
    }

    pub fn kind(&self) -> SmoothKind {
        self.kind
    }

    fn size(&self) -> usize {
        self.kernel.shape()[0]
    }
}

impl Preprocessor for LinearSmooth {
    fn describe(&self) -> String {
        let k = self.size();
        match self.kind {
            SmoothKind::Average => format!("average:{k}"),
            SmoothKind::Gaussian { sigma } => format!("gaussian:{k}:{sigma}"),
            SmoothKind::Conv => {
                let w: Vec<String> = self.kernel.data().iter().map(|v| v.to_string()).collect();
                format!("conv:{k}:{}", w.join(":"))
            }
        }
    }

    fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let k = self.size();
        let dims = check_fits("linear_smooth_2d", x, k)?;
        let (data, kern) = (x.data(), self.kernel.data());
        let mut out = vec![0.0; x.numel()];
        for_each_window(dims, k, |o, window| {
            out[o] = window.iter().zip(kern).map(|(&s, &kv)| kv * data[s]).sum();
        });
        Tensor::new(x.shape().to_vec(), out)
    }

    fn vjp(&self, input: &Tensor, _output: &Tensor, upstream: &Tensor) -> Result<Tensor> {
        check_upstream("linear_smooth_vjp", input, upstream)?;
        let k = self.size();
        let dims = check_fits("linear_smooth_2d", input, k)?;
        let (up, kern) = (upstream.data(), self.kernel.data());
        let mut g = vec![0.0; input.numel()];
        for_each_window(dims, k, |o, window| {
            for (&s, &kv) in window.iter().zip(kern) {
                g[s] += kv * up[o];
            }
        });
        Tensor::new(input.shape().to_vec(), g)
    }

    fn is_differentiable(&self) -> bool {
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_diff_grad, relative_error};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn img(data: Vec<f64>, h: usize, w: usize) -> Tensor {
        Tensor::new(vec![1, 1, h, w], data).unwrap()
    }

    /// Brute force: pad by reflection, sort each full window, take the middle.
    fn median_oracle(x: &[f64], h: usize, w: usize, k: usize) -> Vec<f64> {
        let p = (k / 2) as isize;
        let at = |r: isize, c: isize| {
            let r = if r < 0 { -r } else if r >= h as isize { 2 * (h as isize - 1) - r } else { r };
            let c = if c < 0 { -c } else if c >= w as isize { 2 * (w as isize - 1) - c } else { c };
            x[r as usize * w + c as usize]
        };
        let mut out = Vec::new();
        for i in 0..h as isize {
            for j in 0..w as isize {
                let mut win = Vec::new();
                for a in -p..=p {
                    for b in -p..=p {
                        win.push(at(i + a, j + b));
                    }
                }
                win.sort_by(|a, b| a.partial_cmp(b).unwrap());
                out.push(win[win.len() / 2]);
            }
        }
        out
    }

    #[test]
    fn median_matches_sorting_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for trial in 0..100 {
            let data: Vec<f64> = (0..64).map(|_| rng.random::<f64>()).collect();
            let k = [3, 5, 7][trial % 3];
            let y = MedianSmooth::new(k).unwrap().apply(&img(data.clone(), 8, 8)).unwrap();
            assert_eq!(y.data(), median_oracle(&data, 8, 8, k).as_slice());
        }
        // Quantized values exercise ties; non-square images exercise bounds.
        for (h, w) in [(5, 9), (9, 5), (3, 3)] {
            let data: Vec<f64> = (0..h * w).map(|_| rng.random_range(0..4) as f64 / 3.0).collect();
            let y = MedianSmooth::new(3).unwrap().apply(&img(data.clone(), h, w)).unwrap();
            assert_eq!(y.data(), median_oracle(&data, h, w, 3).as_slice());
        }
    }

    #[test]
    fn median_examples() {
        let m = MedianSmooth::new(3).unwrap();
        let flat = img(vec![0.3; 25], 5, 5);
        assert_eq!(m.apply(&flat).unwrap(), flat);
        let mut impulse = vec![0.3; 25];
        impulse[12] = 1.0;
        assert_eq!(m.apply(&img(impulse, 5, 5)).unwrap(), flat);
        assert!(MedianSmooth::new(4).is_err());
        assert!(m.apply(&img(vec![0.0; 4], 2, 2)).is_err());
    }

    #[test]
    fn median_gradient_routes_to_selected_pixel() {
        let m = MedianSmooth::new(3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = img((0..30).map(|_| rng.random::<f64>()).collect(), 5, 6);
        let up = img((0..30).map(|_| rng.random::<f64>() - 0.5).collect(), 5, 6);
        let y = m.apply(&x).unwrap();
        let g = m.vjp(&x, &y, &up).unwrap();
        // Distinct values: the median is locally a coordinate projection.
        let fd = finite_diff_grad(
            |v| Ok(m.apply(v)?.zip_map(&up, |a, b| a * b)?.sum()),
            &x,
            1e-7,
        )
        .unwrap();
        assert!(relative_error(&g, &fd) < 1e-6);
        assert!((g.sum() - up.sum()).abs() < 1e-12);
    }

    #[test]
    fn linear_smooth_examples() {
        let mut delta = vec![0.0; 9];
        delta[4] = 1.0;
        let id = LinearSmooth::conv(Tensor::new(vec![3, 3], delta).unwrap()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = img((0..42).map(|_| rng.random::<f64>()).collect(), 6, 7);
        assert_eq!(id.apply(&x).unwrap(), x);

        let flat = img(vec![0.6; 25], 5, 5);
        let avg = LinearSmooth::average(3).unwrap().apply(&flat).unwrap();
        assert!(avg.data().iter().all(|v| (v - 0.6).abs() < 1e-15));

        for (k, sigma) in [(3, 0.5), (5, 1.0), (7, 2.5)] {
            let g = LinearSmooth::gaussian(k, sigma).unwrap();
            assert!((g.kernel().sum() - 1.0).abs() <= 1e-12);
        }
        assert!(LinearSmooth::average(2).is_err());
        assert!(LinearSmooth::gaussian(3, 0.0).is_err());
        assert!(LinearSmooth::conv(Tensor::full(vec![3, 3], 0.2)).is_err());
        assert!(LinearSmooth::conv(Tensor::full(vec![2, 2], 0.1)).is_err());
    }

    #[test]
    fn linear_smooth_vjp_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let s = LinearSmooth::gaussian(5, 1.2).unwrap();
        let x = Tensor::new(vec![2, 2, 6, 5], (0..120).map(|_| rng.random::<f64>()).collect()).unwrap();
        let up = Tensor::new(vec![2, 2, 6, 5], (0..120).map(|_| rng.random::<f64>() - 0.5).collect()).unwrap();
        let g = s.vjp(&x, &s.apply(&x).unwrap(), &up).unwrap();
        let fd = finite_diff_grad(|v| Ok(s.apply(v)?.zip_map(&up, |a, b| a * b)?.sum()), &x, 1e-5).unwrap();
        assert!(relative_error(&g, &fd) < 1e-8);
    }
}
