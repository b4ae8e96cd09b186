//! Frequency encoding `[p, sin(2ˡπp), cos(2ˡπp)]` for `l = 0..L`.

use super::Real;

/// Output width for a `dim`-dimensional input with `octaves` frequencies,
/// raw input included.
pub fn encoded_dim(dim: usize, octaves: usize) -> usize {
    dim * (1 + 2 * octaves)
}

/// Writes the encoding of `p` into `out`: the raw input first, then for
/// each octave the sines of every component followed by the cosines.
pub fn positional_encode<T: Real>(p: &[T], octaves: usize, out: &mut [T]) {
    let d = p.len();
    debug_assert_eq!(out.len(), encoded_dim(d, octaves));
    out[..d].copy_from_slice(p);
    let mut freq = T::of(std::f64::consts::PI);
    for l in 0..octaves {
        let base = d + 2 * d * l;
        for j in 0..d {
            let (s, c) = (p[j] * freq).sin_cos();
            out[base + j] = s;
            out[base + d + j] = c;
        }
        freq = freq + freq;
    }
}

pub fn encode_vec<T: Real>(p: &[T], octaves: usize) -> Vec<T> {
    let mut out = vec![T::zero(); encoded_dim(p.len(), octaves)];
    positional_encode(p, octaves, &mut out);
    out
}

/// Accumulates the input gradient given the gradient of the encoding.
pub fn encode_backward<T: Real>(p: &[T], octaves: usize, d_out: &[T], d_p: &mut [T]) {
    let d = p.len();
    for j in 0..d {
        d_p[j] += d_out[j];
    }
    let mut freq = T::of(std::f64::consts::PI);
    for l in 0..octaves {
        let base = d + 2 * d * l;
        for j in 0..d {
            let (s, c) = (p[j] * freq).sin_cos();
            d_p[j] += (d_out[base + j] * c - d_out[base + d + j] * s) * freq;
        }
        freq = freq + freq;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zero_input() {
        let e = encode_vec(&[0.0f64; 3], 4);
        assert_eq!(e.len(), 27);
        for l in 0..4 {
            let base = 3 + 6 * l;
            assert!(e[base..base + 3].iter().all(|&s| s == 0.0));
            assert!(e[base + 3..base + 6].iter().all(|&c| c == 1.0));
        }
    }

    #[test]
    fn unit_input_first_octave() {
        let e = encode_vec(&[1.0f64], 1);
        assert_eq!(e[0], 1.0);
        assert!(e[1].abs() < 1e-15);
        assert_eq!(e[2], -1.0);
    }

    #[test]
    fn dimension() {
        assert_eq!(encoded_dim(3, 10), 63);
        assert_eq!(encoded_dim(3, 0), 3);
        assert_eq!(encode_vec(&[0.3f32, 0.1, -0.2], 6).len(), 39);
    }

    proptest! {
        #[test]
        fn parity(x in -1.0f64..1.0, y in -1.0f64..1.0, z in -1.0f64..1.0) {
            let a = encode_vec(&[x, y, z], 5);
            let b = encode_vec(&[-x, -y, -z], 5);
            for l in 0..5 {
                let base = 3 + 6 * l;
                for j in 0..3 {
                    prop_assert!((a[base + j] + b[base + j]).abs() < 1e-12);
                    prop_assert!((a[base + 3 + j] - b[base + 3 + j]).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn backward_matches_finite_difference(x in -1.0f64..1.0, y in -1.0f64..1.0, seed in 0u64..1000) {
            let p = [x, y];
            let weights: Vec<f64> = (0..encoded_dim(2, 3)).map(|i| ((i as u64 * 7919 + seed) % 13) as f64 / 13.0 - 0.5).collect();
            let f = |q: &[f64]| -> f64 { encode_vec(q, 3).iter().zip(&weights).map(|(a, b)| a * b).sum() };
            let mut grad = [0.0; 2];
            encode_backward(&p, 3, &weights, &mut grad);
            for j in 0..2 {
                let h = 1e-6;
                let mut hi = p;
                let mut lo = p;
                hi[j] += h;
                lo[j] -= h;
                let fd = (f(&hi) - f(&lo)) / (2.0 * h);
                prop_assert!((fd - grad[j]).abs() < 1e-6 * (1.0 + fd.abs()));
            }
        }
    }
}
