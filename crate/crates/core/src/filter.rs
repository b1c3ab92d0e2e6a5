//! Separable Gaussian filtering on row-major planes.

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Border {
    /// Samples outside the plane are zero.
    Zero,
    /// Samples outside the plane repeat the nearest edge value.
    Clamp,
}

/// Kernel radius used for a given sigma.
pub fn kernel_radius(sigma: f64) -> usize {
    (3.0 * sigma).ceil() as usize
}

/// Normalized Gaussian taps over `[-radius, radius]`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = kernel_radius(sigma) as i64;
    let inv = 1.0 / (2.0 * sigma * sigma);
    let taps: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 * inv).exp()).collect();
    let sum: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / sum).collect()
}

/// Blurs `plane` (width × height) in place. `sigma <= 0` is a no-op.
pub fn gaussian_blur(plane: &mut [f64], width: usize, height: usize, sigma: f64, border: Border) {
    assert_eq!(plane.len(), width * height);
    if sigma <= 0.0 || plane.is_empty() {
        return;
    }
    let kernel = gaussian_kernel(sigma);
    let r = (kernel.len() / 2) as isize;
    let mut line = Vec::new();

    let mut pass = |plane: &mut [f64], len: usize, count: usize, index: &dyn Fn(usize, usize) -> usize| {
        for k in 0..count {
            line.clear();
            line.extend((0..len).map(|i| plane[index(k, i)]));
            for i in 0..len {
                let mut acc = 0.0;
                for (j, w) in kernel.iter().enumerate() {
                    let src = i as isize + j as isize - r;
                    let v = if (0..len as isize).contains(&src) {
                        line[src as usize]
                    } else {
                        match border {
                            Border::Zero => continue,
                            Border::Clamp => line[src.clamp(0, len as isize - 1) as usize],
                        }
                    };
                    acc += w * v;
                }
                plane[index(k, i)] = acc;
            }
        }
    };
    pass(plane, width, height, &|row, i| row * width + i);
    pass(plane, height, width, &|col, i| i * width + col);
}

#[cfg(test)]
mod tests {
    use approx::assert_abs_diff_eq;

    use super::*;

    #[test]
    fn kernel_sums_to_one_and_is_symmetric() {
        let k = gaussian_kernel(1.7);
        assert_eq!(k.len(), 2 * kernel_radius(1.7) + 1);
        assert_abs_diff_eq!(k.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        for i in 0..k.len() / 2 {
            assert_eq!(k[i], k[k.len() - 1 - i]);
        }
    }

    #[test]
    fn clamp_border_preserves_constants() {
        let mut p = vec![0.25; 7 * 5];
        gaussian_blur(&mut p, 7, 5, 2.0, Border::Clamp);
        for v in p {
            assert_abs_diff_eq!(v, 0.25, epsilon = 1e-12);
        }
    }

    #[test]
    fn zero_border_preserves_mass_of_interior_impulse() {
        let (w, h) = (21, 21);
        let mut p = vec![0.0; w * h];
        p[10 * w + 10] = 1.0;
        gaussian_blur(&mut p, w, h, 1.5, Border::Zero);
        assert_abs_diff_eq!(p.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        assert!(p[10 * w + 10] < 1.0);
        assert_abs_diff_eq!(p[10 * w + 9], p[9 * w + 10], epsilon = 1e-15);
    }
}
