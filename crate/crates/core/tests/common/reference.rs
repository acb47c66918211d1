//! Straight-from-the-definition f64 forward passes. Finite differences are
//! taken on these, never on the f32 implementation under test.

#[derive(Clone, Debug)]
pub struct Arr {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Arr {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape: shape.to_vec(), data }
    }

    pub fn from_f32(t: &camb::nn::Tensor) -> Self {
        Self::new(t.shape(), t.data().iter().map(|&v| f64::from(v)).collect())
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::new(&self.shape, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let w = self.shape[1..].iter().product::<usize>();
        &self.data[i * w..(i + 1) * w]
    }
}

/// Records which side of every kink the forward pass took.
#[derive(Default, Debug, PartialEq, Eq, Clone)]
pub struct Branches(pub Vec<u64>);

pub fn conv2d(x: &Arr, w: &Arr, b: &Arr, stride: usize, pad: usize) -> Arr {
    let (n, c, h, wd) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let (o, k) = (w.shape[0], w.shape[2]);
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; n * o * oh * ow];
    for s in 0..n {
        for f in 0..o {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b.data[f];
                    for ch in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += x.data[((s * c + ch) * h + iy as usize) * wd + ix as usize]
                                    * w.data[((f * c + ch) * k + ky) * k + kx];
                            }
                        }
                    }
                    out[((s * o + f) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    Arr::new(&[n, o, oh, ow], out)
}

pub fn relu(x: &Arr, br: &mut Branches) -> Arr {
    br.0.extend(x.data.iter().map(|&v| (v > 0.0) as u64));
    x.map(|v| v.max(0.0))
}

pub fn max_pool(x: &Arr, size: usize, br: &mut Branches) -> Arr {
    let (n, c, h, w) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let (oh, ow) = (h / size, w / size);
    let mut out = Vec::new();
    for p in 0..n * c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = (f64::NEG_INFINITY, 0);
                for dy in 0..size {
                    for dx in 0..size {
                        let idx = p * h * w + (oy * size + dy) * w + ox * size + dx;
                        if x.data[idx] > best.0 {
                            best = (x.data[idx], idx);
                        }
                    }
                }
                br.0.push(best.1 as u64);
                out.push(best.0);
            }
        }
    }
    Arr::new(&[n, c, oh, ow], out)
}

pub fn gap(x: &Arr) -> Arr {
    let hw = x.shape[2] * x.shape[3];
    Arr::new(
        &x.shape[..2],
        x.data.chunks(hw).map(|c| c.iter().sum::<f64>() / hw as f64).collect(),
    )
}

pub fn linear(x: &Arr, w: &Arr, b: &Arr) -> Arr {
    let (n, k, m) = (x.shape[0], x.shape[1], w.shape[0]);
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            out[i * m + j] = b.data[j] + (0..k).map(|p| x.data[i * k + p] * w.data[j * k + p]).sum::<f64>();
        }
    }
    Arr::new(&[n, m], out)
}

pub fn softmax(x: &Arr) -> Arr {
    let w = *x.shape.last().unwrap();
    let mut data = Vec::new();
    for row in x.data.chunks(w) {
        let total: f64 = row.iter().map(|v| v.exp()).sum();
        data.extend(row.iter().map(|v| v.exp() / total));
    }
    Arr::new(&x.shape, data)
}

pub fn l2_normalize(x: &Arr) -> Arr {
    let w = *x.shape.last().unwrap();
    let mut data = Vec::new();
    for row in x.data.chunks(w) {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        data.extend(row.iter().map(|v| v / norm));
    }
    Arr::new(&x.shape, data)
}

pub fn zip(a: &Arr, b: &Arr, f: impl Fn(f64, f64) -> f64) -> Arr {
    Arr::new(&a.shape, a.data.iter().zip(&b.data).map(|(x, y)| f(*x, *y)).collect())
}

pub fn scale(x: &Arr, f: f64) -> Arr {
    x.map(|v| v * f)
}

pub fn log(x: &Arr) -> Arr {
    x.map(f64::ln)
}

pub fn exp(x: &Arr) -> Arr {
    x.map(f64::exp)
}

pub fn dot(a: &Arr, b: &Arr) -> f64 {
    a.data.iter().zip(&b.data).map(|(x, y)| x * y).sum()
}

pub fn ce(probs: &Arr, labels: &[usize]) -> f64 {
    let rows: Vec<Vec<f64>> = (0..labels.len()).map(|i| probs.row(i).to_vec()).collect();
    super::naive_ce(&rows, labels)
}

pub fn scl(z: &Arr, labels: &[usize], tau: f64) -> f64 {
    let rows: Vec<Vec<f64>> = (0..labels.len()).map(|i| z.row(i).to_vec()).collect();
    super::naive_scl(&rows, labels, tau).unwrap()
}

pub fn triplet(e: &Arr, triplets: &[(usize, usize, usize)], margin: f64, br: &mut Branches) -> f64 {
    if triplets.is_empty() {
        return 0.0;
    }
    let d = |i: usize, j: usize| e.row(i).iter().zip(e.row(j)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    let mut total = 0.0;
    for &(a, p, n) in triplets {
        let h = d(a, p) - d(a, n) + margin;
        br.0.push((h > 0.0) as u64);
        total += h.max(0.0);
    }
    total / triplets.len() as f64
}
