//! Gradient-domain compositing by Gauss-Seidel on the discrete Poisson
//! equation.

use crate::data::RgbImage;
use crate::{Error, Result, Scalar};

/// Three-channel image with real-valued samples on the 0..255 scale.
#[derive(Clone, Debug, PartialEq)]
pub struct FloatImage<S> {
    pub width: usize,
    pub height: usize,
    /// Row-major, channel-interleaved.
    pub data: Vec<S>,
}

impl<S: Scalar> FloatImage<S> {
    pub fn filled(width: usize, height: usize, rgb: [S; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&rgb);
        }
        Self { width, height, data }
    }

    pub fn from_rgb(img: &RgbImage) -> Self {
        Self {
            width: img.width,
            height: img.height,
            data: img.data.iter().map(|v| S::lit(*v as f64)).collect(),
        }
    }

    /// Rounds to the nearest intensity and clamps into `0..=255`.
    pub fn to_rgb(&self) -> RgbImage {
        let mut img = RgbImage::new(self.width, self.height);
        for (o, v) in img.data.iter_mut().zip(&self.data) {
            *o = v.as_f64().round().clamp(0.0, 255.0) as u8;
        }
        img
    }

    pub fn get(&self, x: usize, y: usize, c: usize) -> S {
        self.data[(y * self.width + x) * 3 + c]
    }

    pub fn set(&mut self, x: usize, y: usize, c: usize, v: S) {
        self.data[(y * self.width + x) * 3 + c] = v;
    }

    /// The `w × h` window whose top-left corner is `(x0, y0)`.
    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<Self> {
        if x0 + w > self.width || y0 + h > self.height {
            return Err(Error::arg("crop window outside image"));
        }
        let mut data = Vec::with_capacity(w * h * 3);
        for y in y0..y0 + h {
            let row = (y * self.width + x0) * 3;
            data.extend_from_slice(&self.data[row..row + w * 3]);
        }
        Ok(Self { width: w, height: h, data })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PoissonConfig {
    /// Stop once the largest equation residual falls below this.
    pub tolerance: f64,
    pub max_sweeps: usize,
}

impl Default for PoissonConfig {
    fn default() -> Self {
        Self {
            tolerance: 1e-6,
            max_sweeps: 5000,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Blend<S> {
    pub image: FloatImage<S>,
    pub sweeps: usize,
    pub residual: f64,
}

/// One unknown pixel: its 4-neighbours inside the image split into unknowns
/// (by index) and fixed contributions folded into `rhs`.
struct Node<S> {
    at: usize,
    neighbours: usize,
    unknowns: Vec<usize>,
    rhs: [S; 3],
}

const OFFSETS: [(isize, isize); 4] = [(-1, 0), (1, 0), (0, -1), (0, 1)];

/// Composites `src` into `dst` with its top-left corner at `origin`.
///
/// Pixels where `mask` is set are solved so their discrete Laplacian matches
/// that of `src`, with the surrounding `dst` pixels as Dirichlet boundary.
/// Neighbour pairs that leave the `src` window carry zero guidance. Every
/// pixel outside the mask keeps its `dst` value exactly.
pub fn poisson_blend<S: Scalar>(
    src: &FloatImage<S>,
    dst: &FloatImage<S>,
    mask: &[bool],
    origin: (usize, usize),
    cfg: &PoissonConfig,
) -> Result<Blend<S>> {
    let (w, h) = (src.width, src.height);
    if mask.len() != w * h {
        return Err(Error::shape(format!("mask has {} entries for a {w}x{h} patch", mask.len())));
    }
    if !mask.iter().any(|m| *m) {
        return Err(Error::arg("empty blend mask"));
    }
    let (ox, oy) = origin;
    if ox + w > dst.width || oy + h > dst.height {
        return Err(Error::arg(format!("patch at ({ox},{oy}) exceeds destination bounds")));
    }

    let (dw, dh) = (dst.width as isize, dst.height as isize);
    let mut index = vec![usize::MAX; dst.width * dst.height];
    let mut cells = Vec::new();
    for (i, _) in mask.iter().enumerate().filter(|(_, m)| **m) {
        let (sx, sy) = (i % w, i / w);
        let at = (oy + sy) * dst.width + ox + sx;
        index[at] = cells.len();
        cells.push((sx, sy, at));
    }

    let mut nodes = Vec::with_capacity(cells.len());
    for &(sx, sy, at) in &cells {
        let (x, y) = ((ox + sx) as isize, (oy + sy) as isize);
        let mut node = Node {
            at,
            neighbours: 0,
            unknowns: Vec::with_capacity(4),
            rhs: [S::zero(); 3],
        };
        for (dx, dy) in OFFSETS {
            let (nx, ny) = (x + dx, y + dy);
            if nx < 0 || ny < 0 || nx >= dw || ny >= dh {
                continue;
            }
            node.neighbours += 1;
            let q = ny as usize * dst.width + nx as usize;
            let (qx, qy) = (sx as isize + dx, sy as isize + dy);
            let inside_src = qx >= 0 && qy >= 0 && qx < w as isize && qy < h as isize;
            for c in 0..3 {
                if inside_src {
                    node.rhs[c] += src.get(sx, sy, c) - src.get(qx as usize, qy as usize, c);
                }
                if index[q] == usize::MAX {
                    node.rhs[c] += dst.data[q * 3 + c];
                }
            }
            if index[q] != usize::MAX {
                node.unknowns.push(index[q]);
            }
        }
        nodes.push(node);
    }

    let mut f: Vec<[S; 3]> = nodes
        .iter()
        .map(|n| [0, 1, 2].map(|c| dst.data[n.at * 3 + c]))
        .collect();
    let residual = |f: &[[S; 3]]| {
        let mut worst = 0.0f64;
        for (i, n) in nodes.iter().enumerate() {
            for c in 0..3 {
                let mut r = S::from_usize(n.neighbours).unwrap() * f[i][c] - n.rhs[c];
                for &j in &n.unknowns {
                    r -= f[j][c];
                }
                worst = worst.max(r.as_f64().abs());
            }
        }
        worst
    };

    let mut sweeps = 0;
    let mut res = residual(&f);
    while res >= cfg.tolerance {
        if sweeps == cfg.max_sweeps {
            return Err(Error::NonConvergence { residual: res, sweeps });
        }
        for i in 0..nodes.len() {
            let n = &nodes[i];
            let k = S::from_usize(n.neighbours).unwrap();
            for c in 0..3 {
                let mut acc = n.rhs[c];
                for &j in &n.unknowns {
                    acc += f[j][c];
                }
                f[i][c] = acc / k;
            }
        }
        sweeps += 1;
        res = residual(&f);
    }

    let mut image = dst.clone();
    for (n, v) in nodes.iter().zip(&f) {
        image.data[n.at * 3..n.at * 3 + 3].copy_from_slice(v);
    }
    Ok(Blend {
        image,
        sweeps,
        residual: res,
    })
}
