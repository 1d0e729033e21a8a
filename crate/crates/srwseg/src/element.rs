//! Scalar element trait shared by the autodiff graph and numeric kernels.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::AddAssign;

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive};

/// Floating-point element type the whole numeric stack is generic over.
///
/// Training runs at `f32`; gradient verification and oracle computations run
/// the same code at `f64`.
pub trait Element:
    Float
    + FromPrimitive
    + LinalgScalar
    + ScalarOperand
    + AddAssign
    + Sum
    + Send
    + Sync
    + Debug
    + Display
    + 'static
{
    /// Converts an `f64` literal into this element type.
    fn lit(v: f64) -> Self;
    /// Widens to `f64` for reporting and statistics.
    fn as_f64(self) -> f64;
    /// Bytes per scalar in serialized form (doubles as the dtype tag).
    const DTYPE_BYTES: u8;
    /// Appends the little-endian encoding.
    fn write_le(self, out: &mut Vec<u8>);
    /// Decodes from exactly `DTYPE_BYTES` little-endian bytes.
    fn read_le(bytes: &[u8]) -> Self;
}

impl Element for f32 {
    fn lit(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    const DTYPE_BYTES: u8 = 4;
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Element for f64 {
    fn lit(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    const DTYPE_BYTES: u8 = 8;
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}
