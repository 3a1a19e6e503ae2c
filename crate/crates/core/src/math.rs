//! Float math shims: `std` methods when available, `libm` otherwise.

#[cfg(feature = "std")]
mod imp {
    pub fn sqrt_f32(x: f32) -> f32 {
        x.sqrt()
    }
    pub fn sqrt_f64(x: f64) -> f64 {
        x.sqrt()
    }
    pub fn exp_f64(x: f64) -> f64 {
        x.exp()
    }
    pub fn ln_f64(x: f64) -> f64 {
        x.ln()
    }
    pub fn cos_f64(x: f64) -> f64 {
        x.cos()
    }
}

#[cfg(not(feature = "std"))]
mod imp {
    pub fn sqrt_f32(x: f32) -> f32 {
        libm::sqrtf(x)
    }
    pub fn sqrt_f64(x: f64) -> f64 {
        libm::sqrt(x)
    }
    pub fn exp_f64(x: f64) -> f64 {
        libm::exp(x)
    }
    pub fn ln_f64(x: f64) -> f64 {
        libm::log(x)
    }
    pub fn cos_f64(x: f64) -> f64 {
        libm::cos(x)
    }
}

pub(crate) use imp::*;
