//! Minimal row-major 2D raster used by the sector detector and slice export.

use std::collections::VecDeque;

#[derive(Debug, Clone, PartialEq)]
pub struct Image2D<T> {
    width: usize,
    height: usize,
    data: Vec<T>,
}

pub type Mask2D = Image2D<bool>;

impl<T: Copy> Image2D<T> {
    pub fn filled(width: usize, height: usize, value: T) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), width * height, "image buffer size");
        Self { width, height, data }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> T {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: T) {
        self.data[y * self.width + x] = v;
    }

    /// Border-clamped read.
    #[inline]
    pub fn get_clamped(&self, x: isize, y: isize) -> T {
        let x = x.clamp(0, self.width as isize - 1) as usize;
        let y = y.clamp(0, self.height as isize - 1) as usize;
        self.get(x, y)
    }

    pub fn map<U: Copy>(&self, f: impl Fn(T) -> U) -> Image2D<U> {
        Image2D {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

impl Mask2D {
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    /// Morphological closing with a `size`×`size` square. Pixels outside the
    /// image count as background, so digitised convex regions that touch
    /// the border come back unchanged.
    pub fn close(&self, size: usize) -> Mask2D {
        let r = size / 2;
        if r == 0 {
            return self.clone();
        }
        let (w, h) = (self.width + 2 * r, self.height + 2 * r);
        let padded = Mask2D::from_fn(w, h, |x, y| {
            x >= r && y >= r && x < r + self.width && y < r + self.height && self.get(x - r, y - r)
        });
        let closed = padded.square_filter(size, true).square_filter(size, false);
        Mask2D::from_fn(self.width, self.height, |x, y| closed.get(x + r, y + r))
    }

    // Separable running OR/AND over a (2r+1)-wide window.
    fn square_filter(&self, size: usize, dilate: bool) -> Mask2D {
        let r = (size / 2) as isize;
        if r == 0 {
            return self.clone();
        }
        let (w, h) = (self.width as isize, self.height as isize);
        let pass = |src: &Mask2D, horizontal: bool| -> Mask2D {
            Mask2D::from_fn(self.width, self.height, |x, y| {
                let (x, y) = (x as isize, y as isize);
                let (lo, hi) = if horizontal {
                    ((x - r).max(0), (x + r).min(w - 1))
                } else {
                    ((y - r).max(0), (y + r).min(h - 1))
                };
                let mut acc = !dilate;
                for t in lo..=hi {
                    let v = if horizontal {
                        src.get(t as usize, y as usize)
                    } else {
                        src.get(x as usize, t as usize)
                    };
                    if dilate {
                        acc |= v;
                    } else {
                        acc &= v;
                    }
                    if acc == dilate {
                        break;
                    }
                }
                acc
            })
        };
        let tmp = pass(self, true);
        pass(&tmp, false)
    }

    /// Sets every background pixel that is not 4-connected to the image
    /// border.
    pub fn fill_holes(&self) -> Mask2D {
        let (w, h) = (self.width, self.height);
        let mut outside = vec![false; w * h];
        let mut queue = VecDeque::new();
        let seed = |x: usize, y: usize, outside: &mut Vec<bool>, queue: &mut VecDeque<(usize, usize)>| {
            let i = y * w + x;
            if !self.data[i] && !outside[i] {
                outside[i] = true;
                queue.push_back((x, y));
            }
        };
        for x in 0..w {
            seed(x, 0, &mut outside, &mut queue);
            seed(x, h - 1, &mut outside, &mut queue);
        }
        for y in 0..h {
            seed(0, y, &mut outside, &mut queue);
            seed(w - 1, y, &mut outside, &mut queue);
        }
        while let Some((x, y)) = queue.pop_front() {
            if x > 0 {
                seed(x - 1, y, &mut outside, &mut queue);
            }
            if x + 1 < w {
                seed(x + 1, y, &mut outside, &mut queue);
            }
            if y > 0 {
                seed(x, y - 1, &mut outside, &mut queue);
            }
            if y + 1 < h {
                seed(x, y + 1, &mut outside, &mut queue);
            }
        }
        Mask2D::from_vec(w, h, outside.into_iter().map(|o| !o).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closing_fills_small_gap_and_keeps_border() {
        let mut m = Mask2D::filled(9, 9, true);
        m.set(4, 4, false);
        m.set(5, 4, false);
        let c = m.close(5);
        assert_eq!(c.count(), 81);
    }

    #[test]
    fn closing_is_identity_on_half_plane() {
        let m = Mask2D::from_fn(40, 30, |x, y| 3 * x as i64 + 7 * y as i64 >= 90);
        assert_eq!(m.close(5), m);
    }

    #[test]
    fn fill_holes_keeps_border_connected_background() {
        let m = Mask2D::from_fn(10, 10, |x, y| {
            let ring = (2..8).contains(&x) && (2..8).contains(&y) && !((4..6).contains(&x) && (4..6).contains(&y));
            ring || x == 0
        });
        let f = m.fill_holes();
        assert!(f.get(4, 4));
        assert!(!f.get(9, 9));
        assert!(!f.get(1, 5));
    }
}
