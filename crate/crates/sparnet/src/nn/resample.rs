//! Fixed 2x spatial resampling layers (no learnable parameters).

use ndarray::Array4;

use super::{Layer, Scalar};

/// Nearest-neighbour upsampling by a factor of two.
pub struct NearestUp2;

impl<F: Scalar> Layer<F> for NearestUp2 {
    fn forward(&mut self, x: &Array4<F>, _train: bool) -> Array4<F> {
        let (n, c, h, w) = x.dim();
        Array4::from_shape_fn((n, c, 2 * h, 2 * w), |(b, ch, y, z)| {
            x[[b, ch, y / 2, z / 2]]
        })
    }

    fn backward(&mut self, grad_out: &Array4<F>) -> Array4<F> {
        let (n, c, h2, w2) = grad_out.dim();
        assert!(h2 % 2 == 0 && w2 % 2 == 0, "upsample gradient has odd size");
        let (h, w) = (h2 / 2, w2 / 2);
        Array4::from_shape_fn((n, c, h, w), |(b, ch, y, z)| {
            grad_out[[b, ch, 2 * y, 2 * z]]
                + grad_out[[b, ch, 2 * y, 2 * z + 1]]
                + grad_out[[b, ch, 2 * y + 1, 2 * z]]
                + grad_out[[b, ch, 2 * y + 1, 2 * z + 1]]
        })
    }
}

/// 2x2 average pooling with stride two. Input sides must be even.
pub struct AvgPool2;

impl<F: Scalar> Layer<F> for AvgPool2 {
    fn forward(&mut self, x: &Array4<F>, _train: bool) -> Array4<F> {
        let (n, c, h, w) = x.dim();
        assert!(h % 2 == 0 && w % 2 == 0, "average pool input has odd size");
        let quarter = F::from_f64(0.25);
        Array4::from_shape_fn((n, c, h / 2, w / 2), |(b, ch, y, z)| {
            (x[[b, ch, 2 * y, 2 * z]]
                + x[[b, ch, 2 * y, 2 * z + 1]]
                + x[[b, ch, 2 * y + 1, 2 * z]]
                + x[[b, ch, 2 * y + 1, 2 * z + 1]])
                * quarter
        })
    }

    fn backward(&mut self, grad_out: &Array4<F>) -> Array4<F> {
        let (n, c, h, w) = grad_out.dim();
        let quarter = F::from_f64(0.25);
        Array4::from_shape_fn((n, c, 2 * h, 2 * w), |(b, ch, y, z)| {
            grad_out[[b, ch, y / 2, z / 2]] * quarter
        })
    }
}

/// 2x2 max pooling with stride two. Input sides must be even.
pub struct MaxPool2<F> {
    // Winning offset (dy * 2 + dx) per output cell from the last forward.
    argmax: Option<Array4<u8>>,
    _marker: std::marker::PhantomData<F>,
}

impl<F> MaxPool2<F> {
    pub fn new() -> Self {
        Self {
            argmax: None,
            _marker: std::marker::PhantomData,
        }
    }
}

impl<F> Default for MaxPool2<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Layer<F> for MaxPool2<F> {
    fn forward(&mut self, x: &Array4<F>, train: bool) -> Array4<F> {
        let (n, c, h, w) = x.dim();
        assert!(h % 2 == 0 && w % 2 == 0, "max pool input has odd size");
        let mut arg = Array4::zeros((n, c, h / 2, w / 2));
        let out = Array4::from_shape_fn((n, c, h / 2, w / 2), |(b, ch, y, z)| {
            let mut best = x[[b, ch, 2 * y, 2 * z]];
            let mut which = 0u8;
            for (idx, (dy, dx)) in [(0, 1), (1, 0), (1, 1)].into_iter().enumerate() {
                let v = x[[b, ch, 2 * y + dy, 2 * z + dx]];
                if v > best {
                    best = v;
                    which = idx as u8 + 1;
                }
            }
            arg[[b, ch, y, z]] = which;
            best
        });
        self.argmax = if train { Some(arg) } else { None };
        out
    }

    fn backward(&mut self, grad_out: &Array4<F>) -> Array4<F> {
        let arg = self.argmax.as_ref().expect("max pool backward before forward");
        let (n, c, h, w) = grad_out.dim();
        let mut grad_in = Array4::zeros((n, c, 2 * h, 2 * w));
        for b in 0..n {
            for ch in 0..c {
                for y in 0..h {
                    for z in 0..w {
                        let which = arg[[b, ch, y, z]] as usize;
                        let (dy, dx) = (which / 2, which % 2);
                        grad_in[[b, ch, 2 * y + dy, 2 * z + dx]] += grad_out[[b, ch, y, z]];
                    }
                }
            }
        }
        grad_in
    }
}
