use std::fmt::{Debug, Display};

use num_traits::{Float, NumAssignOps};

/// Scalar types tensors can hold. Implemented for `f32` and `f64`.
///
/// `NumCast` (via `Float`) supplies lossy conversion from literals;
/// the byte accessors exist for the little-endian checkpoint payload.
pub trait Scalar:
    Float + NumAssignOps + Debug + Display + Default + Send + Sync + 'static
{
    const DTYPE: &'static str;
    const BYTE_WIDTH: usize;

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    /// Shorthand for `T::from(x).unwrap()`; the conversion from `f64`
    /// cannot fail for the two supported scalar types.
    fn from_f64(x: f64) -> Self {
        Self::from(x).unwrap()
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap()
    }
}

impl Scalar for f32 {
    const DTYPE: &'static str = "f32";
    const BYTE_WIDTH: usize = 4;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().unwrap())
    }
}

impl Scalar for f64 {
    const DTYPE: &'static str = "f64";
    const BYTE_WIDTH: usize = 8;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().unwrap())
    }
}
