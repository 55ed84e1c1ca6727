use crate::tensor::{lit, Scalar, Tensor};

/// Fixed 2D sine-cosine table `[rows·cols, dim]`. The first half of each row
/// encodes the grid row, the second half the grid column; each half is
/// `dim/4` sines followed by `dim/4` cosines at frequencies `10000^(-k/(dim/4))`.
pub fn sincos_2d<T: Scalar>(dim: usize, rows: usize, cols: usize) -> Tensor<T> {
    assert!(dim.is_multiple_of(4), "positional dim must be a multiple of 4");
    let quarter = dim / 4;
    let omega: Vec<f64> = (0..quarter)
        .map(|k| 1.0 / 10000f64.powf(k as f64 / quarter as f64))
        .collect();
    let mut data = Vec::with_capacity(rows * cols * dim);
    for r in 0..rows {
        for c in 0..cols {
            for pos in [r as f64, c as f64] {
                data.extend(omega.iter().map(|w| lit::<T>((pos * w).sin())));
                data.extend(omega.iter().map(|w| lit::<T>((pos * w).cos())));
            }
        }
    }
    Tensor::from_parts(vec![rows * cols, dim], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_pairwise_distinct_at_14x14() {
        let t = sincos_2d::<f64>(16, 14, 14);
        let d = 16;
        let rows: Vec<&[f64]> = t.data().chunks(d).collect();
        let mut min = f64::INFINITY;
        for i in 0..rows.len() {
            for j in i + 1..rows.len() {
                let dist: f64 = rows[i].iter().zip(rows[j]).map(|(a, b)| (a - b) * (a - b)).sum();
                min = min.min(dist.sqrt());
            }
        }
        assert!(min > 0.0, "min pairwise distance {min}");
    }

    #[test]
    fn origin_row_is_zero_sines_unit_cosines() {
        let t = sincos_2d::<f32>(8, 2, 3);
        assert_eq!(&t.data()[..8], &[0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 1.0]);
    }
}
