//! Spatial maps: real-valued difference maps and binary masks, plus
//! 4-connected component labeling.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Per-pixel real map, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffMap<T> {
    height: usize,
    width: usize,
    values: Vec<T>,
}

impl<T: Scalar> DiffMap<T> {
    pub fn new(height: usize, width: usize, values: Vec<T>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::shape(
                format!("{height}x{width} map"),
                format!("{} values", values.len()),
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidValue("difference map contains non-finite values".into()));
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            values: vec![T::zero(); height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn get(&self, y: usize, x: usize) -> T {
        self.values[y * self.width + x]
    }

    pub fn mean(&self) -> T {
        let n = T::from_usize(self.values.len()).unwrap();
        self.values.iter().copied().sum::<T>() / n
    }

    pub fn max(&self) -> T {
        self.values
            .iter()
            .copied()
            .fold(T::neg_infinity(), T::max)
    }

    /// True when every value lies in `[0, 1]`.
    pub fn is_normalized(&self) -> bool {
        self.values
            .iter()
            .all(|&v| v >= T::zero() && v <= T::one())
    }

    /// Pixels strictly above `threshold`.
    pub fn above(&self, threshold: T) -> BinaryMask {
        BinaryMask {
            height: self.height,
            width: self.width,
            bits: self.values.iter().map(|&v| v > threshold).collect(),
        }
    }
}

/// Per-pixel boolean mask, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::shape(
                format!("{height}x{width} mask"),
                format!("{} bits", bits.len()),
            ));
        }
        Ok(Self {
            height,
            width,
            bits,
        })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![false; height * width],
        }
    }

    pub fn full(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![true; height * width],
        }
    }

    /// Mask with the axis-aligned rectangle `[y0, y1) × [x0, x1)` set.
    pub fn rect(height: usize, width: usize, y0: usize, y1: usize, x0: usize, x1: usize) -> Self {
        let mut m = Self::empty(height, width);
        for y in y0..y1.min(height) {
            for x in x0..x1.min(width) {
                m.bits[y * width + x] = true;
            }
        }
        m
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, value: bool) {
        self.bits[y * self.width + x] = value;
    }

    pub fn area(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    pub fn same_size(&self, other: &BinaryMask) -> Result<()> {
        if (self.height, self.width) != (other.height, other.width) {
            return Err(Error::shape(
                format!("{}x{} mask", self.height, self.width),
                format!("{}x{} mask", other.height, other.width),
            ));
        }
        Ok(())
    }

    pub fn intersection_count(&self, other: &BinaryMask) -> usize {
        self.bits
            .iter()
            .zip(&other.bits)
            .filter(|(&a, &b)| a && b)
            .count()
    }

    /// 4-connected components of the set pixels.
    pub fn components(&self) -> Vec<Component> {
        label_components(self)
    }

    /// Keeps the `max_components` largest components. Equal areas are
    /// ordered by the row-major index of each component's first pixel.
    pub fn retain_largest(&self, max_components: usize) -> BinaryMask {
        let mut comps = self.components();
        comps.sort_by(|a, b| b.area().cmp(&a.area()).then(a.first_index.cmp(&b.first_index)));
        let mut out = BinaryMask::empty(self.height, self.width);
        for comp in comps.iter().take(max_components) {
            for &p in &comp.pixels {
                out.bits[p] = true;
            }
        }
        out
    }
}

/// One connected region; `pixels` are row-major indices in ascending order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Component {
    pub first_index: usize,
    pub pixels: Vec<usize>,
}

impl Component {
    pub fn area(&self) -> usize {
        self.pixels.len()
    }
}

fn find(parent: &mut [usize], mut x: usize) -> usize {
    while parent[x] != x {
        parent[x] = parent[parent[x]];
        x = parent[x];
    }
    x
}

// Two-pass labeling with union-find over the up and left neighbours.
fn label_components(mask: &BinaryMask) -> Vec<Component> {
    let (h, w) = (mask.height, mask.width);
    let mut parent: Vec<usize> = (0..h * w).collect();
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            if !mask.bits[p] {
                continue;
            }
            if x > 0 && mask.bits[p - 1] {
                let (a, b) = (find(&mut parent, p), find(&mut parent, p - 1));
                parent[a.max(b)] = a.min(b);
            }
            if y > 0 && mask.bits[p - w] {
                let (a, b) = (find(&mut parent, p), find(&mut parent, p - w));
                parent[a.max(b)] = a.min(b);
            }
        }
    }
    // Roots are the smallest index in each set, so they are the first pixels.
    let mut slot = vec![usize::MAX; h * w];
    let mut comps: Vec<Component> = Vec::new();
    for p in 0..h * w {
        if !mask.bits[p] {
            continue;
        }
        let r = find(&mut parent, p);
        if slot[r] == usize::MAX {
            slot[r] = comps.len();
            comps.push(Component {
                first_index: r,
                pixels: Vec::new(),
            });
        }
        comps[slot[r]].pixels.push(p);
    }
    comps
}
