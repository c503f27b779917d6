use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Patch-grid activations: `height × width` tokens of `channels` features,
/// stored as a (height·width)×channels matrix in row-major grid order.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub height: usize,
    pub width: usize,
    pub data: Matrix,
}

impl FeatureMap {
    pub fn new(height: usize, width: usize, data: Matrix) -> Result<Self> {
        if data.rows() != height * width {
            return Err(Error::shape(
                "FeatureMap::new",
                format!("{height}x{width} grid needs {} rows, got {}", height * width, data.rows()),
            ));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn channels(&self) -> usize {
        self.data.cols()
    }

    pub fn token(&self, y: usize, x: usize) -> &[f64] {
        self.data.row(y * self.width + x)
    }
}

fn check_window(height: usize, width: usize, m: usize) -> Result<()> {
    if m == 0 || height % m != 0 || width % m != 0 {
        return Err(Error::shape(
            "window_partition",
            format!("{height}x{width} grid is not divisible into {m}x{m} windows"),
        ));
    }
    Ok(())
}

/// Source token index for each row of the window-major layout: windows in
/// row-major order, tokens row-major inside each window.
pub fn partition_order(height: usize, width: usize, m: usize) -> Result<Vec<usize>> {
    check_window(height, width, m)?;
    let mut order = Vec::with_capacity(height * width);
    for wy in 0..height / m {
        for wx in 0..width / m {
            for ty in 0..m {
                for tx in 0..m {
                    order.push((wy * m + ty) * width + wx * m + tx);
                }
            }
        }
    }
    Ok(order)
}

/// Source token index for each position of a grid rolled by `(dy, dx)`:
/// the token at `(y, x)` moves to `((y+dy) mod h, (x+dx) mod w)`.
pub fn shift_order(height: usize, width: usize, dy: isize, dx: isize) -> Vec<usize> {
    let (h, w) = (height as isize, width as isize);
    let mut order = Vec::with_capacity(height * width);
    for y in 0..h {
        for x in 0..w {
            let sy = (y - dy).rem_euclid(h);
            let sx = (x - dx).rem_euclid(w);
            order.push((sy * w + sx) as usize);
        }
    }
    order
}

pub fn invert_permutation(order: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; order.len()];
    for (dst, &src) in order.iter().enumerate() {
        inv[src] = dst;
    }
    inv
}

fn permute_rows(m: &Matrix, order: &[usize]) -> Matrix {
    let mut out = Matrix::zeros(order.len(), m.cols());
    for (dst, &src) in order.iter().enumerate() {
        out.row_mut(dst).copy_from_slice(m.row(src));
    }
    out
}

/// Splits the grid into non-overlapping `m×m` windows, each an m²×C block.
pub fn window_partition(f: &FeatureMap, m: usize) -> Result<Vec<Matrix>> {
    let order = partition_order(f.height, f.width, m)?;
    let tokens = permute_rows(&f.data, &order);
    let per = m * m;
    Ok((0..order.len() / per)
        .map(|w| tokens.block(w * per, per, 0, tokens.cols()))
        .collect())
}

/// Inverse of [`window_partition`].
pub fn window_unpartition(
    windows: &[Matrix],
    height: usize,
    width: usize,
    m: usize,
) -> Result<FeatureMap> {
    let order = partition_order(height, width, m)?;
    let per = m * m;
    if windows.len() * per != order.len() || windows.iter().any(|w| w.rows() != per) {
        return Err(Error::shape("window_unpartition", "window count or size mismatch"));
    }
    let c = windows[0].cols();
    let mut data = Matrix::zeros(height * width, c);
    for (row, &src) in order.iter().enumerate() {
        let win = &windows[row / per];
        data.row_mut(src).copy_from_slice(win.row(row % per));
    }
    FeatureMap::new(height, width, data)
}

/// Toroidal roll of the patch grid.
pub fn cyclic_shift(f: &FeatureMap, dy: isize, dx: isize) -> FeatureMap {
    let order = shift_order(f.height, f.width, dy, dx);
    FeatureMap {
        height: f.height,
        width: f.width,
        data: permute_rows(&f.data, &order),
    }
}
