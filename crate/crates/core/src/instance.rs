//! Problem instances and their line-oriented JSON document format.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::aoi_graph::{AoiGraph, Axial, GraphError, NodeFeatures};
use crate::geometry::{AoiPolygon, Family, Point};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("schema violation: {0}")]
    Schema(String),
    #[error("malformed document on line {line}: {source}")]
    Json {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

/// Outcome of the Hamiltonian feasibility audit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Audit {
    pub hamiltonian: bool,
    /// Cell sequence from a base neighbour to a terminal neighbour.
    pub witness: Option<Vec<usize>>,
    pub expansions: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AoiInstance {
    pub id: String,
    pub seed: u64,
    pub rs_nm: f64,
    pub polygon: AoiPolygon,
    pub graph: AoiGraph,
    pub audit: Audit,
    pub split: Option<Split>,
}

impl AoiInstance {
    pub fn family(&self) -> Family {
        self.polygon.family
    }

    pub fn to_document(&self) -> InstanceDocument {
        let g = &self.graph;
        let nodes = (0..g.num_nodes())
            .map(|i| {
                let p = g.position(i);
                let (q, r) = if g.is_cell(i) {
                    let a = g.cells()[i];
                    (Some(a.q), Some(a.r))
                } else {
                    (None, None)
                };
                NodeDoc { id: i, q, r, x_nm: p.x, y_nm: p.y }
            })
            .collect();
        InstanceDocument {
            format_version: FORMAT_VERSION,
            id: self.id.clone(),
            seed: self.seed,
            family: self.polygon.family,
            rs_nm: self.rs_nm,
            polygon: PolygonDoc {
                outer: self.polygon.outer.iter().map(|p| [p.x, p.y]).collect(),
                holes: self
                    .polygon
                    .holes
                    .iter()
                    .map(|h| h.iter().map(|p| [p.x, p.y]).collect())
                    .collect(),
            },
            nodes,
            edges: g.edges().into_iter().map(|(a, b)| [a, b]).collect(),
            base: g.base(),
            terminal: g.terminal(),
            features: g.features().to_vec(),
            split: self.split,
            audit: self.audit.clone(),
        }
    }

    pub fn from_document(doc: InstanceDocument) -> Result<Self, FormatError> {
        if doc.format_version != FORMAT_VERSION {
            return Err(FormatError::Version {
                found: doc.format_version,
                expected: FORMAT_VERSION,
            });
        }
        let total = doc.nodes.len();
        if total < 3 {
            return Err(FormatError::Schema("need at least one cell plus base and terminal".into()));
        }
        let n = total - 2;
        if doc.base != n || doc.terminal != n + 1 {
            return Err(FormatError::Schema("base/terminal must be the last two node ids".into()));
        }
        if doc.features.len() != total {
            return Err(FormatError::Schema("feature count differs from node count".into()));
        }
        for (i, f) in doc.features.iter().enumerate() {
            if !(f.w.is_finite() && f.w >= 0.0) {
                return Err(FormatError::Schema(format!("node {i}: hexscore w must be >= 0")));
            }
            if f.m != 0.0 && f.m != 1.0 {
                return Err(FormatError::Schema(format!("node {i}: base indicator must be 0 or 1")));
            }
        }
        if !(doc.rs_nm.is_finite() && doc.rs_nm > 0.0) {
            return Err(FormatError::Schema("rs_nm must be positive".into()));
        }
        let mut cells = Vec::with_capacity(n);
        let mut positions = Vec::with_capacity(total);
        for (i, nd) in doc.nodes.iter().enumerate() {
            if nd.id != i {
                return Err(FormatError::Schema(format!("node ids must be dense, got {} at {i}", nd.id)));
            }
            if i < n {
                match (nd.q, nd.r) {
                    (Some(q), Some(r)) => cells.push(Axial { q, r }),
                    _ => return Err(FormatError::Schema(format!("cell {i} lacks axial coordinates"))),
                }
            }
            positions.push(Point::new(nd.x_nm, nd.y_nm));
        }
        let mut adjacency = vec![Vec::new(); total];
        for &[a, b] in &doc.edges {
            if a >= total || b >= total || a == b {
                return Err(FormatError::Schema(format!("bad edge [{a}, {b}]")));
            }
            adjacency[a].push(b);
            adjacency[b].push(a);
        }
        let hexscore = doc.features[..n].iter().map(|f| f.w).collect();
        let graph = AoiGraph::from_parts(cells, positions, adjacency, hexscore, 3f64.sqrt() * doc.rs_nm)?;
        let to_pts = |v: &[[f64; 2]]| v.iter().map(|&[x, y]| Point::new(x, y)).collect::<Vec<_>>();
        let polygon = AoiPolygon {
            outer: to_pts(&doc.polygon.outer),
            holes: doc.polygon.holes.iter().map(|h| to_pts(h)).collect(),
            family: doc.family,
        };
        if let Some(w) = &doc.audit.witness {
            if w.iter().any(|&c| c >= n) {
                return Err(FormatError::Schema("witness references a non-cell node".into()));
            }
        }
        Ok(Self {
            id: doc.id,
            seed: doc.seed,
            rs_nm: doc.rs_nm,
            polygon,
            graph,
            audit: doc.audit,
            split: doc.split,
        })
    }

    /// One-line canonical JSON.
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(&self.to_document()).expect("instance documents always serialize")
    }

    pub fn from_json_line(line: &str) -> Result<Self, FormatError> {
        let doc: InstanceDocument =
            serde_json::from_str(line).map_err(|source| FormatError::Json { line: 1, source })?;
        Self::from_document(doc)
    }

    /// SHA-256 of the canonical line, hex encoded.
    pub fn checksum(&self) -> String {
        sha256_hex(self.to_json_line().as_bytes())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeDoc {
    pub id: usize,
    pub q: Option<i32>,
    pub r: Option<i32>,
    pub x_nm: f64,
    pub y_nm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolygonDoc {
    pub outer: Vec<[f64; 2]>,
    pub holes: Vec<Vec<[f64; 2]>>,
}

/// Field order here is the on-disk order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceDocument {
    pub format_version: u32,
    pub id: String,
    pub seed: u64,
    pub family: Family,
    pub rs_nm: f64,
    pub polygon: PolygonDoc,
    pub nodes: Vec<NodeDoc>,
    pub edges: Vec<[usize; 2]>,
    pub base: usize,
    pub terminal: usize,
    pub features: Vec<NodeFeatures>,
    pub split: Option<Split>,
    pub audit: Audit,
}

/// Streams instances from newline-delimited documents; blank lines skipped.
pub fn read_corpus_stream<R: BufRead>(reader: R) -> impl Iterator<Item = Result<AoiInstance, FormatError>> {
    reader.lines().enumerate().filter_map(|(i, line)| match line {
        Err(e) => Some(Err(FormatError::Io(e))),
        Ok(l) if l.trim().is_empty() => None,
        Ok(l) => Some(
            serde_json::from_str::<InstanceDocument>(&l)
                .map_err(|source| FormatError::Json { line: i + 1, source })
                .and_then(AoiInstance::from_document),
        ),
    })
}

/// Parses a whole corpus held in memory.
pub fn parse_corpus(text: &str) -> Result<Vec<AoiInstance>, FormatError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str::<InstanceDocument>(l)
                .map_err(|source| FormatError::Json { line: i + 1, source })
                .and_then(AoiInstance::from_document)
        })
        .collect()
}

pub fn read_corpus(path: &std::path::Path) -> Result<Vec<AoiInstance>, FormatError> {
    let f = std::fs::File::open(path)?;
    read_corpus_stream(std::io::BufReader::new(f)).collect()
}

pub fn write_corpus<W: Write>(mut w: W, instances: &[AoiInstance]) -> Result<(), FormatError> {
    for inst in instances {
        writeln!(w, "{}", inst.to_json_line())?;
    }
    w.flush()?;
    Ok(())
}
