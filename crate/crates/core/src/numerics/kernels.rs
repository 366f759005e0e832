//! Convolution kernels. All three share one tap enumeration, so the
//! transposed and weight-gradient maps are exact adjoints of the forward map.

use super::scalar::Scalar;
use super::tensor::Tensor;
use crate::ir::{ConvAttrs, TensorShape};

/// Calls `f(w_idx, x_idx, y_idx)` for every multiply-add of the convolution
/// from `x` to `y`.
#[inline]
fn for_each_tap(
    a: &ConvAttrs,
    x: TensorShape,
    y: TensorShape,
    mut f: impl FnMut(usize, usize, usize),
) {
    let (k, s, p) = (a.kernel, a.stride, a.padding as isize);
    let (ipg, opg) = (a.in_per_group(), a.out_per_group());
    for n in 0..x.batch {
        for o in 0..y.channels {
            let g = o / opg;
            for c in 0..ipg {
                let ci = g * ipg + c;
                let x_plane = (n * x.channels + ci) * x.height * x.width;
                let w_base = (o * ipg + c) * k * k;
                for i in 0..y.height {
                    let y_row = ((n * y.channels + o) * y.height + i) * y.width;
                    for ki in 0..k {
                        let hi = (i * s + ki) as isize - p;
                        if hi < 0 || hi >= x.height as isize {
                            continue;
                        }
                        let x_row = x_plane + hi as usize * x.width;
                        for j in 0..y.width {
                            for kj in 0..k {
                                let wj = (j * s + kj) as isize - p;
                                if wj < 0 || wj >= x.width as isize {
                                    continue;
                                }
                                f(w_base + ki * k + kj, x_row + wj as usize, y_row + j);
                            }
                        }
                    }
                }
            }
        }
    }
}

pub fn conv_output_shape(a: &ConvAttrs, x: TensorShape) -> Option<TensorShape> {
    Some(TensorShape::new(
        x.batch,
        a.out_channels,
        a.output_extent(x.height)?,
        a.output_extent(x.width)?,
    ))
}

pub fn conv2d<T: Scalar>(x: &Tensor<T>, w: &[T], bias: Option<&[T]>, a: &ConvAttrs) -> Tensor<T> {
    let ys = conv_output_shape(a, x.shape()).expect("conv shape checked before execution");
    let mut y = Tensor::zeros(ys);
    if let Some(b) = bias {
        let plane = ys.height * ys.width;
        for (idx, v) in y.data_mut().iter_mut().enumerate() {
            *v = b[(idx / plane) % ys.channels];
        }
    }
    let (xd, yd) = (x.data(), y.data_mut());
    for_each_tap(a, x.shape(), ys, |wi, xi, yi| yd[yi] += w[wi] * xd[xi]);
    y
}

/// Adjoint of [`conv2d`] with respect to its input: maps a tensor shaped
/// like the convolution's output back to `x_shape`.
pub fn conv2d_transpose<T: Scalar>(
    dy: &Tensor<T>,
    w: &[T],
    a: &ConvAttrs,
    x_shape: TensorShape,
) -> Tensor<T> {
    let mut dx = Tensor::zeros(x_shape);
    let (yd, xd) = (dy.data(), dx.data_mut());
    for_each_tap(a, x_shape, dy.shape(), |wi, xi, yi| {
        xd[xi] += w[wi] * yd[yi]
    });
    dx
}

/// Gradient of `<conv2d(x, w), dy>` with respect to `w`.
pub fn conv2d_weight_grad<T: Scalar>(x: &Tensor<T>, dy: &Tensor<T>, a: &ConvAttrs) -> Vec<T> {
    let mut dw = vec![T::zero(); a.weight_len()];
    let (xd, yd) = (x.data(), dy.data());
    for_each_tap(a, x.shape(), dy.shape(), |wi, xi, yi| {
        dw[wi] += xd[xi] * yd[yi]
    });
    dw
}

pub fn bias_grad<T: Scalar>(dy: &Tensor<T>) -> Vec<T> {
    let s = dy.shape();
    let plane = s.height * s.width;
    let mut db = vec![T::zero(); s.channels];
    for (idx, &v) in dy.data().iter().enumerate() {
        db[(idx / plane) % s.channels] += v;
    }
    db
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_kernel_copies_input() {
        let a = ConvAttrs::new(1, 1, 3, 1);
        let mut w = vec![0.0; 9];
        w[4] = 1.0;
        let x = Tensor::from_vec(
            TensorShape::image(1, 2, 3),
            vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0],
        )
        .unwrap();
        assert_eq!(conv2d(&x, &w, None, &a), x);
    }

    #[test]
    fn strided_sum_kernel() {
        let a = ConvAttrs::new(1, 1, 2, 2).with_padding(0);
        let x = Tensor::from_vec(
            TensorShape::image(1, 2, 4),
            (1..=8).map(f64::from).collect(),
        )
        .unwrap();
        let y = conv2d(&x, &[1.0; 4], Some(&[0.5]), &a);
        assert_eq!(
            y.data(),
            &[1.0 + 2.0 + 5.0 + 6.0 + 0.5, 3.0 + 4.0 + 7.0 + 8.0 + 0.5]
        );
    }

    #[test]
    fn grouped_conv_keeps_groups_apart() {
        let a = ConvAttrs::new(2, 2, 1, 1).with_groups(2);
        let x = Tensor::from_vec(TensorShape::image(2, 1, 1), vec![3.0, 5.0]).unwrap();
        let y = conv2d(&x, &[2.0, 10.0], None, &a);
        assert_eq!(y.data(), &[6.0, 50.0]);
    }
}
