use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Parameters of the machine a kernel is compiled for.
#[derive(Clone, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TargetDescriptor {
    pub name: String,
    /// Vector width in f32 elements.
    pub lanes: usize,
    pub vregs: usize,
    /// Maximum number of instructions in one unrolled region.
    pub default_unroll_limit: usize,
    /// Cache sizes in bytes, innermost level first.
    pub cache_sizes: Vec<usize>,
}

impl TargetDescriptor {
    pub fn avx2() -> Self {
        Self::make("avx2", 8, 16, vec![32 << 10, 256 << 10, 8 << 20])
    }

    pub fn avx512() -> Self {
        Self::make("avx512", 16, 32, vec![32 << 10, 1 << 20, 32 << 20])
    }

    pub fn neon() -> Self {
        Self::make("neon", 4, 32, vec![64 << 10, 4 << 20])
    }

    fn make(name: &str, lanes: usize, vregs: usize, cache_sizes: Vec<usize>) -> Self {
        TargetDescriptor { name: name.into(), lanes, vregs, default_unroll_limit: 320, cache_sizes }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "avx2" => Ok(Self::avx2()),
            "avx512" => Ok(Self::avx512()),
            "neon" => Ok(Self::neon()),
            other => Err(Error::Invalid(alloc::format!("unknown target `{other}`"))),
        }
    }

    pub fn all() -> [Self; 3] {
        [Self::avx2(), Self::avx512(), Self::neon()]
    }

    pub fn check(&self) -> Result<()> {
        if ![4, 8, 16].contains(&self.lanes) || ![16, 32].contains(&self.vregs) {
            return Err(Error::Invalid(alloc::format!(
                "target `{}`: lanes {} / vregs {} unsupported",
                self.name,
                self.lanes,
                self.vregs
            )));
        }
        if self.default_unroll_limit == 0 {
            return Err(Error::ZeroUnroll);
        }
        Ok(())
    }
}

impl Default for TargetDescriptor {
    fn default() -> Self {
        Self::avx512()
    }
}
