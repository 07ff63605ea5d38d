use alloc::string::String;

/// Index of a symbolic dimension in a [`Dfg`](super::Dfg) variable table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct VarId(pub u32);

impl VarId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum SplitPart {
    Outer,
    Inner,
}

#[derive(Clone, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SplitOrigin {
    pub parent: VarId,
    pub factor: usize,
    pub part: SplitPart,
}

/// A named dimension. Split products keep a link to the variable they came from.
#[derive(Clone, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Var {
    pub id: VarId,
    pub name: String,
    pub size: usize,
    pub origin: Option<SplitOrigin>,
    /// `(outer, inner)` once this variable has been split.
    pub children: Option<(VarId, VarId)>,
}

impl Var {
    pub fn is_leaf(&self) -> bool {
        self.children.is_none()
    }

    pub fn is_root(&self) -> bool {
        self.origin.is_none()
    }
}
