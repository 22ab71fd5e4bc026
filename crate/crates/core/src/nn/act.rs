use crate::tensor::Tensor4;

pub fn relu(x: &Tensor4) -> Tensor4 {
    x.map(|v| v.max(0.0))
}

/// Gradient of ReLU given its output.
pub fn relu_backward(dy: &Tensor4, y: &Tensor4) -> Tensor4 {
    dy.zip_map(y, |g, v| if v > 0.0 { g } else { 0.0 })
        .expect("relu_backward shapes")
}

/// Gradient of `clamp(x, lo, hi)` given its input: passes where `lo <= x <= hi`.
pub fn clamp_backward(dy: &Tensor4, x: &Tensor4, lo: f64, hi: f64) -> Tensor4 {
    dy.zip_map(x, |g, v| if v >= lo && v <= hi { g } else { 0.0 })
        .expect("clamp_backward shapes")
}

/// Spatial mean of every plane, `[n, c, 1, 1]`.
pub fn global_avg_pool(x: &Tensor4) -> Tensor4 {
    let hw = (x.h() * x.w()) as f64;
    Tensor4::from_fn(x.n(), x.c(), 1, 1, |b, c, _, _| x.plane(b, c).iter().sum::<f64>() / hw)
}

pub fn global_avg_pool_backward(dy: &Tensor4, h: usize, w: usize) -> Tensor4 {
    let hw = (h * w) as f64;
    Tensor4::from_fn(dy.n(), dy.c(), h, w, |b, c, _, _| dy.at(b, c, 0, 0) / hw)
}

/// Broadcasts a `[n, c, 1, 1]` tensor over `h x w`.
pub fn broadcast_hw(x: &Tensor4, h: usize, w: usize) -> Tensor4 {
    Tensor4::from_fn(x.n(), x.c(), h, w, |b, c, _, _| x.at(b, c, 0, 0))
}

pub fn broadcast_hw_backward(dy: &Tensor4) -> Tensor4 {
    Tensor4::from_fn(dy.n(), dy.c(), 1, 1, |b, c, _, _| dy.plane(b, c).iter().sum())
}
