use candle_core::DType;

use crate::error::{invalid, Result};

pub const PRECISION_ENV: &str = "SEGPOINT_PRECISION";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(invalid(format!("{PRECISION_ENV} must be f32 or f64, got {other:?}"))),
        }
    }

    /// Precision from the environment; 32-bit when unset.
    pub fn from_env() -> Result<Self> {
        match std::env::var(PRECISION_ENV) {
            Ok(v) => Self::parse(&v),
            Err(_) => Ok(Precision::F32),
        }
    }

    pub fn dtype(self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }

    pub fn from_dtype(dtype: DType) -> Result<Self> {
        match dtype {
            DType::F32 => Ok(Precision::F32),
            DType::F64 => Ok(Precision::F64),
            other => Err(invalid(format!("unsupported parameter dtype {other:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_names() {
        assert_eq!(Precision::parse("f64").unwrap().dtype(), DType::F64);
        assert_eq!(Precision::parse("f32").unwrap().name(), "f32");
        assert!(Precision::parse("bf16").is_err());
    }
}
