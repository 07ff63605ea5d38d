//! JSON form of a dataflow graph.
//!
//! ```json
//! {
//!   "vars": [{"name": "m", "size": 512},
//!            {"name": "m_o", "size": 103, "split": {"parent": "m", "factor": 5, "part": "outer"}}],
//!   "nodes": [{"id": 0, "kind": "read", "slot": 0, "inputs": [], "dims": ["m", "k"],
//!              "order": ["m", "k"], "staged": []},
//!             {"id": 2, "kind": "arith", "inputs": [0, 1], "dims": ["m", "n"], "order": [...],
//!              "staged": [], "op": "add", "pre": "identity", "post": "identity",
//!              "alpha": 0.0, "beta": 1.0, "init": false},
//!             {"id": 3, "kind": "view", "inputs": [0], "fill": 0.0,
//!              "constraints": [{"input_dim": "i", "terms": [["x", 1], ["r", 1]], "offset": -2}], ...}],
//!   "outputs": [{"slot": 2, "node": 4}]
//! }
//! ```
//!
//! Variables are listed in table order and referenced by name everywhere else.
//! Non-finite floats are written as the strings `"inf"`, `"-inf"` and `"nan"`.
//! `outputs` mirrors the write nodes and is checked on load.

use std::collections::BTreeMap;

use looptree_core::ir::{
    validate, Arith, ArithOp, DType, Dfg, ElementwiseOp, IndexConstraint, Node, NodeId, NodeKind, SplitOrigin,
    SplitPart, Var, VarId, VirtualBuffer,
};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error("malformed JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unknown variable `{0}`")]
    UnknownVar(String),
    #[error("invalid graph: {0}")]
    Invalid(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DfgJson {
    pub vars: Vec<VarJson>,
    pub nodes: Vec<NodeJson>,
    #[serde(default)]
    pub outputs: Vec<OutputJson>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VarJson {
    pub name: String,
    pub size: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<SplitJson>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitJson {
    pub parent: String,
    pub factor: usize,
    pub part: SplitPart,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KindJson {
    Read,
    Write,
    Arith,
    View,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeJson {
    pub id: u32,
    pub kind: KindJson,
    #[serde(default)]
    pub inputs: Vec<u32>,
    pub dims: Vec<String>,
    pub order: Vec<String>,
    #[serde(default)]
    pub staged: Vec<String>,
    /// Read and write nodes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slot: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub op: Option<ArithOp>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pre: Option<ElementwiseOp>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub post: Option<ElementwiseOp>,
    #[serde(default, skip_serializing_if = "Option::is_none", with = "float")]
    pub alpha: Option<f32>,
    #[serde(default, skip_serializing_if = "Option::is_none", with = "float")]
    pub beta: Option<f32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub constraints: Option<Vec<ConstraintJson>>,
    #[serde(default, skip_serializing_if = "Option::is_none", with = "float")]
    pub fill: Option<f32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstraintJson {
    pub input_dim: String,
    pub terms: Vec<(String, i64)>,
    #[serde(default)]
    pub offset: i64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputJson {
    pub slot: usize,
    pub node: u32,
}

mod float {
    use super::*;

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Wire {
        Num(f64),
        Str(String),
    }

    pub fn serialize<S: Serializer>(v: &Option<f32>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            None => s.serialize_none(),
            Some(x) if x.is_nan() => s.serialize_str("nan"),
            Some(x) if x.is_infinite() => s.serialize_str(if *x > 0.0 { "inf" } else { "-inf" }),
            Some(x) => s.serialize_f32(*x),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f32>, D::Error> {
        Ok(match Option::<Wire>::deserialize(d)? {
            None => None,
            Some(Wire::Num(x)) => Some(x as f32),
            Some(Wire::Str(s)) => Some(match s.as_str() {
                "inf" => f32::INFINITY,
                "-inf" => f32::NEG_INFINITY,
                "nan" => f32::NAN,
                other => return Err(serde::de::Error::custom(format!("bad float `{other}`"))),
            }),
        })
    }
}

impl DfgJson {
    pub fn from_dfg(dfg: &Dfg) -> Self {
        let name = |v: VarId| dfg.name(v).to_string();
        let names = |vs: &[VarId]| vs.iter().map(|v| name(*v)).collect::<Vec<_>>();
        let vars = dfg
            .vars()
            .iter()
            .map(|v| VarJson {
                name: v.name.clone(),
                size: v.size,
                split: v.origin.as_ref().map(|o| SplitJson { parent: name(o.parent), factor: o.factor, part: o.part }),
            })
            .collect();
        let mut outputs = Vec::new();
        let nodes = dfg
            .nodes()
            .map(|n| {
                let mut j = NodeJson {
                    id: n.id.0,
                    kind: KindJson::Read,
                    inputs: n.inputs.iter().map(|i| i.0).collect(),
                    dims: names(n.dims()),
                    order: names(&n.order),
                    staged: names(&n.staged),
                    slot: None,
                    op: None,
                    pre: None,
                    post: None,
                    alpha: None,
                    beta: None,
                    init: None,
                    constraints: None,
                    fill: None,
                };
                match &n.kind {
                    NodeKind::Read { slot } => j.slot = Some(*slot),
                    NodeKind::Write { slot } => {
                        j.kind = KindJson::Write;
                        j.slot = Some(*slot);
                        outputs.push(OutputJson { slot: *slot, node: n.id.0 });
                    }
                    NodeKind::Arith(a) => {
                        j.kind = KindJson::Arith;
                        j.op = Some(a.op);
                        j.pre = Some(a.pre);
                        j.post = Some(a.post);
                        j.alpha = Some(a.alpha);
                        j.beta = Some(a.beta);
                        j.init = Some(a.init);
                    }
                    NodeKind::View { constraints, fill } => {
                        j.kind = KindJson::View;
                        j.fill = Some(*fill);
                        j.constraints = Some(
                            constraints
                                .iter()
                                .map(|c| ConstraintJson {
                                    input_dim: name(c.input_dim),
                                    terms: c.terms.iter().map(|(v, k)| (name(*v), *k)).collect(),
                                    offset: c.offset,
                                })
                                .collect(),
                        );
                    }
                }
                j
            })
            .collect();
        DfgJson { vars, nodes, outputs }
    }

    /// Rebuild and validate the graph.
    pub fn to_dfg(&self) -> Result<Dfg, FormatError> {
        let mut ids: BTreeMap<&str, VarId> = BTreeMap::new();
        for (i, v) in self.vars.iter().enumerate() {
            if ids.insert(v.name.as_str(), VarId(i as u32)).is_some() {
                return Err(FormatError::Invalid(format!("duplicate variable `{}`", v.name)));
            }
        }
        let var = |n: &str| ids.get(n).copied().ok_or_else(|| FormatError::UnknownVar(n.to_string()));
        let vars_of = |ns: &[String]| ns.iter().map(|n| var(n)).collect::<Result<Vec<_>, _>>();
        let mut vars = Vec::with_capacity(self.vars.len());
        for (i, v) in self.vars.iter().enumerate() {
            let origin = match &v.split {
                Some(s) => Some(SplitOrigin { parent: var(&s.parent)?, factor: s.factor, part: s.part }),
                None => None,
            };
            vars.push(Var { id: VarId(i as u32), name: v.name.clone(), size: v.size, origin, children: None });
        }
        let mut nodes = Vec::with_capacity(self.nodes.len());
        let mut writes = Vec::new();
        for n in &self.nodes {
            let need_slot = || n.slot.ok_or_else(|| FormatError::Invalid(format!("node {} needs a slot", n.id)));
            let kind = match n.kind {
                KindJson::Read => NodeKind::Read { slot: need_slot()? },
                KindJson::Write => {
                    writes.push(OutputJson { slot: need_slot()?, node: n.id });
                    NodeKind::Write { slot: need_slot()? }
                }
                KindJson::Arith => NodeKind::Arith(Arith {
                    op: n.op.ok_or_else(|| FormatError::Invalid(format!("node {} needs an op", n.id)))?,
                    pre: n.pre.unwrap_or_default(),
                    post: n.post.unwrap_or_default(),
                    alpha: n.alpha.unwrap_or(0.0),
                    beta: n.beta.unwrap_or(1.0),
                    init: n.init.unwrap_or(false),
                }),
                KindJson::View => NodeKind::View {
                    fill: n.fill.unwrap_or(0.0),
                    constraints: n
                        .constraints
                        .iter()
                        .flatten()
                        .map(|c| {
                            Ok(IndexConstraint {
                                input_dim: var(&c.input_dim)?,
                                terms: c.terms.iter().map(|(v, k)| Ok((var(v)?, *k))).collect::<Result<_, FormatError>>()?,
                                offset: c.offset,
                            })
                        })
                        .collect::<Result<_, FormatError>>()?,
                },
            };
            let mut staged = vars_of(&n.staged)?;
            staged.sort();
            staged.dedup();
            nodes.push(Node {
                id: NodeId(n.id),
                kind,
                inputs: n.inputs.iter().map(|i| NodeId(*i)).collect(),
                output: VirtualBuffer { dims: vars_of(&n.dims)?, dtype: DType::F32 },
                order: vars_of(&n.order)?,
                staged,
            });
        }
        if nodes.iter().map(|n| n.id).collect::<std::collections::BTreeSet<_>>().len() != nodes.len() {
            return Err(FormatError::Invalid("duplicate node id".into()));
        }
        if !self.outputs.is_empty() {
            let mut a = self.outputs.clone();
            a.sort_by_key(|o| (o.slot, o.node));
            writes.sort_by_key(|o| (o.slot, o.node));
            if a != writes {
                return Err(FormatError::Invalid("outputs do not match the write nodes".into()));
            }
        }
        let dfg = Dfg::from_parts(vars, nodes).map_err(|e| FormatError::Invalid(e.to_string()))?;
        let bad = validate(&dfg);
        if let Some(v) = bad.first() {
            return Err(FormatError::Invalid(format!("{v} ({} violation(s))", bad.len())));
        }
        Ok(dfg)
    }
}

pub fn to_json(dfg: &Dfg) -> String {
    serde_json::to_string_pretty(&DfgJson::from_dfg(dfg)).expect("graph serializes")
}

pub fn from_json(s: &str) -> Result<Dfg, FormatError> {
    serde_json::from_str::<DfgJson>(s)?.to_dfg()
}

pub fn from_value(v: serde_json::Value) -> Result<Dfg, FormatError> {
    serde_json::from_value::<DfgJson>(v)?.to_dfg()
}
