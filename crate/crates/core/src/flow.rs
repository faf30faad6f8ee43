//! Rectified-flow primitives shared by the latent generator and the pixel
//! decoder. Time runs from noise at `t = 0` to data at `t = 1`.

use candle_core::{Tensor, D};

use crate::error::{Error, Result};

/// `t·data + (1 − t)·noise` for a scalar `t`.
pub fn interpolate(data: &Tensor, noise: &Tensor, t: f64) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::validation("t", format!("{t} outside [0, 1]")));
    }
    if data.dims() != noise.dims() {
        return Err(Error::Shape(format!("data {:?} vs noise {:?}", data.dims(), noise.dims())));
    }
    Ok(((data * t)? + (noise * (1.0 - t))?)?)
}

/// Per-item interpolation: `t` has shape (B,) and broadcasts over the rest.
pub fn interpolate_batch(data: &Tensor, noise: &Tensor, t: &Tensor) -> Result<Tensor> {
    if data.dims() != noise.dims() {
        return Err(Error::Shape(format!("data {:?} vs noise {:?}", data.dims(), noise.dims())));
    }
    let mut shape = vec![t.dim(0)?];
    shape.extend(std::iter::repeat(1).take(data.rank() - 1));
    let t = t.reshape(shape)?;
    let one_minus = t.affine(-1.0, 1.0)?;
    Ok((data.broadcast_mul(&t)? + noise.broadcast_mul(&one_minus)?)?)
}

/// Mean over all elements of `(data − noise − predicted)²`.
pub fn flow_matching_loss(predicted: &Tensor, data: &Tensor, noise: &Tensor) -> Result<Tensor> {
    Ok((data - noise)?.sub(predicted)?.sqr()?.mean_all()?)
}

/// Squared error per batch item, (B,).
pub fn flow_matching_loss_per_item(predicted: &Tensor, data: &Tensor, noise: &Tensor) -> Result<Tensor> {
    let b = data.dim(0)?;
    Ok((data - noise)?.sub(predicted)?.sqr()?.reshape((b, ()))?.mean(D::Minus1)?)
}

/// Classifier-free guidance: `v_uncond + s·(v_cond − v_uncond)`.
pub fn cfg_velocity(v_cond: &Tensor, v_uncond: &Tensor, scale: f64) -> Result<Tensor> {
    if v_cond.dims() != v_uncond.dims() {
        return Err(Error::Shape(format!("{:?} vs {:?}", v_cond.dims(), v_uncond.dims())));
    }
    if scale == 1.0 {
        return Ok(v_cond.clone());
    }
    if scale == 0.0 {
        return Ok(v_uncond.clone());
    }
    Ok((v_uncond + ((v_cond - v_uncond)? * scale)?)?)
}

/// A time-dependent velocity field over batched states.
pub trait VelocityField {
    fn velocity(&self, x: &Tensor, t: f64) -> Result<Tensor>;
}

impl<F> VelocityField for F
where
    F: Fn(&Tensor, f64) -> Result<Tensor>,
{
    fn velocity(&self, x: &Tensor, t: f64) -> Result<Tensor> {
        self(x, t)
    }
}

/// Forward Euler on the uniform grid `t_k = k / steps`, `k = 0..steps`.
/// The field is never evaluated at `t = 1`.
pub fn euler_integrate(field: &impl VelocityField, x0: &Tensor, steps: usize) -> Result<Tensor> {
    if steps < 1 {
        return Err(Error::validation("steps", "must be at least 1"));
    }
    let h = 1.0 / steps as f64;
    let mut x = x0.clone();
    for k in 0..steps {
        let t = k as f64 * h;
        let v = field.velocity(&x, t)?;
        x = (x + (v * h)?)?.detach();
    }
    Ok(x)
}

/// Straight-line field toward a fixed target: `(target − x) / (1 − t)`.
/// Euler integration of it is exact, which makes it a sampler oracle.
pub struct PointMassField {
    pub target: Tensor,
}

impl VelocityField for PointMassField {
    fn velocity(&self, x: &Tensor, t: f64) -> Result<Tensor> {
        Ok(((self.target.broadcast_as(x.shape())? - x)? / (1.0 - t))?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    fn dev() -> Device {
        Device::Cpu
    }

    fn max_abs(a: &Tensor, b: &Tensor) -> f64 {
        (a - b).unwrap().abs().unwrap().max_all().unwrap().to_dtype(DType::F64).unwrap().to_scalar().unwrap()
    }

    #[test]
    fn interpolant_endpoints_and_midpoint() {
        let z = Tensor::new(&[2.0f64, -1.0, 0.5], &dev()).unwrap();
        let e = Tensor::new(&[0.0f64, 3.0, 1.0], &dev()).unwrap();
        assert_eq!(max_abs(&interpolate(&z, &e, 1.0).unwrap(), &z), 0.0);
        assert_eq!(max_abs(&interpolate(&z, &e, 0.0).unwrap(), &e), 0.0);
        let mid: Vec<f64> = interpolate(&z, &e, 0.5).unwrap().to_vec1().unwrap();
        assert_eq!(mid[0], 1.0);
        assert!(matches!(interpolate(&z, &e, 1.5), Err(Error::Validation { .. })));
    }

    #[test]
    fn batch_interpolation_matches_scalar() {
        let z = Tensor::randn(0f64, 1.0, (3, 4, 2), &dev()).unwrap();
        let e = Tensor::randn(0f64, 1.0, (3, 4, 2), &dev()).unwrap();
        let t = Tensor::new(&[0.1f64, 0.5, 0.9], &dev()).unwrap();
        let b = interpolate_batch(&z, &e, &t).unwrap();
        for (i, ti) in [0.1, 0.5, 0.9].into_iter().enumerate() {
            let s = interpolate(&z.get(i).unwrap(), &e.get(i).unwrap(), ti).unwrap();
            assert!(max_abs(&b.get(i).unwrap(), &s) < 1e-15);
        }
    }

    #[test]
    fn flow_loss_cases() {
        let z = Tensor::new(&[1.0f64], &dev()).unwrap();
        let e = Tensor::new(&[-1.0f64], &dev()).unwrap();
        let zero = Tensor::zeros(1, DType::F64, &dev()).unwrap();
        let l: f64 = flow_matching_loss(&zero, &z, &e).unwrap().to_scalar().unwrap();
        assert_eq!(l, 4.0);
        let oracle = (&z - &e).unwrap();
        let l: f64 = flow_matching_loss(&oracle, &z, &e).unwrap().to_scalar().unwrap();
        assert_eq!(l, 0.0);
    }

    #[test]
    fn cfg_identities() {
        let c = Tensor::new(&[2.0f64, -1.0], &dev()).unwrap();
        let u = Tensor::new(&[0.0f64, 0.5], &dev()).unwrap();
        assert_eq!(max_abs(&cfg_velocity(&c, &u, 1.0).unwrap(), &c), 0.0);
        assert_eq!(max_abs(&cfg_velocity(&c, &u, 0.0).unwrap(), &u), 0.0);
        let v: Vec<f64> = cfg_velocity(&c, &u, 1.8).unwrap().to_vec1().unwrap();
        assert!((v[0] - 3.6).abs() < 1e-15);
    }

    #[test]
    fn euler_on_point_mass_is_exact() {
        let target = Tensor::new(&[[0.3f64, -2.0], [1.5, 0.0]], &dev()).unwrap();
        let field = PointMassField { target: target.clone() };
        let x0 = Tensor::randn(0f64, 1.0, (2, 2), &dev()).unwrap();
        for steps in [1, 4, 32] {
            let x = euler_integrate(&field, &x0, steps).unwrap();
            assert!(max_abs(&x, &target) < 1e-12);
        }
        assert!(euler_integrate(&field, &x0, 0).is_err());
    }
}
