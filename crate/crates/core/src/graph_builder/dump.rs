//! Versioned binary graph dump.
//!
//! Layout (all integers and reals little-endian):
//!
//! ```text
//! magic     8 bytes  "HGGRAPH\0"
//! version   u32
//! count     u32
//! per graph:
//!   tag        u32 length + UTF-8 bytes
//!   provenance u8 (0 subsample, 1 core-level)
//!   stage      u8 (1 when a stage column has been fused)
//!   n_nodes    u32
//!   dim        u32
//!   n_edges    u32 (directed)
//!   coords     n_nodes × 2 f64
//!   features   n_nodes × dim f64, row-major
//!   edges      n_edges × (u32 source, u32 target, f64 weight)
//! ```

use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use thiserror::Error;

use super::{Graph, Provenance};

pub const GRAPH_DUMP_MAGIC: &[u8; 8] = b"HGGRAPH\0";
pub const GRAPH_DUMP_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DumpError {
    #[error("not a graph dump (bad magic)")]
    BadMagic,
    #[error("unsupported graph dump version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated graph dump at byte {0}")]
    Truncated(usize),
    #[error("invalid graph {index}: {reason}")]
    InvalidGraph { index: usize, reason: String },
    #[error("trailing bytes after last graph")]
    TrailingBytes,
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// A graph with a free-form identifying tag (typically `core/overlap/index`).
#[derive(Debug, Clone, PartialEq)]
pub struct TaggedGraph {
    pub tag: String,
    pub graph: Graph,
}

pub fn encode_graphs(graphs: &[TaggedGraph]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(GRAPH_DUMP_MAGIC);
    out.extend_from_slice(&GRAPH_DUMP_VERSION.to_le_bytes());
    out.extend_from_slice(&(graphs.len() as u32).to_le_bytes());
    for tg in graphs {
        let g = &tg.graph;
        out.extend_from_slice(&(tg.tag.len() as u32).to_le_bytes());
        out.extend_from_slice(tg.tag.as_bytes());
        out.push(match g.provenance {
            Provenance::Subsample => 0,
            Provenance::CoreLevel => 1,
        });
        out.push(u8::from(g.stage_fused));
        out.extend_from_slice(&(g.n_nodes() as u32).to_le_bytes());
        out.extend_from_slice(&(g.feature_dim() as u32).to_le_bytes());
        out.extend_from_slice(&(g.n_edges() as u32).to_le_bytes());
        for p in &g.coords_um {
            out.extend_from_slice(&p[0].to_le_bytes());
            out.extend_from_slice(&p[1].to_le_bytes());
        }
        for x in g.node_features.iter() {
            out.extend_from_slice(&x.to_le_bytes());
        }
        for (&[u, v], &w) in g.edges.iter().zip(&g.edge_weights) {
            out.extend_from_slice(&(u as u32).to_le_bytes());
            out.extend_from_slice(&(v as u32).to_le_bytes());
            out.extend_from_slice(&w.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], DumpError> {
        let end = self.pos.checked_add(n).ok_or(DumpError::Truncated(self.pos))?;
        let s = self.buf.get(self.pos..end).ok_or(DumpError::Truncated(self.pos))?;
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, DumpError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, DumpError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f64(&mut self) -> Result<f64, DumpError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    /// Fails before allocating when `count × width` bytes cannot be present.
    fn ensure(&self, count: usize, width: usize) -> Result<(), DumpError> {
        match count.checked_mul(width) {
            Some(b) if b <= self.remaining() => Ok(()),
            _ => Err(DumpError::Truncated(self.pos)),
        }
    }
}

/// Decodes and validates a dump. Every graph must satisfy
/// [`Graph::validate`].
pub fn decode_graphs(bytes: &[u8]) -> Result<Vec<TaggedGraph>, DumpError> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    if c.take(8).map_err(|_| DumpError::BadMagic)? != GRAPH_DUMP_MAGIC {
        return Err(DumpError::BadMagic);
    }
    let version = c.u32()?;
    if version != GRAPH_DUMP_VERSION {
        return Err(DumpError::UnsupportedVersion(version));
    }
    let count = c.u32()? as usize;
    // Smallest possible graph record is 4 + 2 + 12 bytes.
    c.ensure(count, 18)?;
    let mut out = Vec::with_capacity(count);
    for index in 0..count {
        let invalid = |reason: String| DumpError::InvalidGraph { index, reason };
        let tag_len = c.u32()? as usize;
        let tag = std::str::from_utf8(c.take(tag_len)?)
            .map_err(|_| invalid("tag is not UTF-8".into()))?
            .to_string();
        let provenance = match c.u8()? {
            0 => Provenance::Subsample,
            1 => Provenance::CoreLevel,
            p => return Err(invalid(format!("unknown provenance {p}"))),
        };
        let stage_fused = match c.u8()? {
            0 => false,
            1 => true,
            s => return Err(invalid(format!("bad stage flag {s}"))),
        };
        let n = c.u32()? as usize;
        let d = c.u32()? as usize;
        let e = c.u32()? as usize;
        c.ensure(n, 16)?;
        let coords = (0..n).map(|_| Ok([c.f64()?, c.f64()?])).collect::<Result<Vec<_>, DumpError>>()?;
        let n_feat = n.checked_mul(d).ok_or_else(|| invalid("feature block overflows".into()))?;
        c.ensure(n_feat, 8)?;
        let feats = (0..n_feat).map(|_| c.f64()).collect::<Result<Vec<_>, _>>()?;
        let node_features = Array2::from_shape_vec((n, d), feats).map_err(|err| invalid(err.to_string()))?;
        c.ensure(e, 16)?;
        let mut edges = Vec::with_capacity(e);
        let mut weights = Vec::with_capacity(e);
        for _ in 0..e {
            edges.push([c.u32()? as usize, c.u32()? as usize]);
            weights.push(c.f64()?);
        }
        if coords.iter().flatten().any(|x| !x.is_finite()) {
            return Err(invalid("non-finite coordinate".into()));
        }
        let mut graph = Graph::new(node_features, coords, edges, weights, provenance);
        graph.stage_fused = stage_fused;
        graph.validate().map_err(invalid)?;
        out.push(TaggedGraph { tag, graph });
    }
    if c.remaining() != 0 {
        return Err(DumpError::TrailingBytes);
    }
    Ok(out)
}

pub fn write_graphs(path: &Path, graphs: &[TaggedGraph]) -> Result<(), DumpError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(&encode_graphs(graphs))?;
    f.flush()?;
    Ok(())
}

pub fn read_graphs(path: &Path) -> Result<Vec<TaggedGraph>, DumpError> {
    decode_graphs(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph_builder::radius_edges;
    use proptest::prelude::*;

    fn graph_from(points: &[(f64, f64)], d: usize) -> Graph {
        let coords: Vec<[f64; 2]> = points.iter().map(|&(x, y)| [x, y]).collect();
        let (edges, weights) = radius_edges(&coords, 20.0, 0.1);
        let feats = Array2::from_shape_fn((coords.len(), d), |(r, c)| (r * 7 + c) as f64 * 0.5);
        Graph::new(feats, coords, edges, weights, Provenance::Subsample)
    }

    proptest! {
        #[test]
        fn encode_decode_round_trip(points in proptest::collection::vec((0.0f64..60.0, 0.0f64..60.0), 0..40), d in 0usize..4) {
            let g = graph_from(&points, d);
            let tagged = vec![TaggedGraph { tag: "core/0.25/3".into(), graph: g }];
            let back = decode_graphs(&encode_graphs(&tagged)).unwrap();
            prop_assert_eq!(back, tagged);
        }

        #[test]
        fn arbitrary_bytes_never_panic(bytes in proptest::collection::vec(any::<u8>(), 0..256)) {
            let _ = decode_graphs(&bytes);
        }
    }

    #[test]
    fn rejects_corruption() {
        let g = graph_from(&[(0.0, 0.0), (5.0, 0.0)], 1);
        let bytes = encode_graphs(&[TaggedGraph { tag: "t".into(), graph: g }]);
        assert!(matches!(decode_graphs(&bytes[..bytes.len() - 1]), Err(DumpError::Truncated(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_graphs(&bad), Err(DumpError::BadMagic)));
        let mut v2 = bytes.clone();
        v2[8] = 2;
        assert!(matches!(decode_graphs(&v2), Err(DumpError::UnsupportedVersion(2))));
        // Point the first edge's target at itself.
        let mut selfloop = bytes.clone();
        let edge_start = bytes.len() - 2 * 16;
        selfloop[edge_start + 4..edge_start + 8].copy_from_slice(&0u32.to_le_bytes());
        assert!(matches!(decode_graphs(&selfloop), Err(DumpError::InvalidGraph { .. })));
        let mut extra = bytes;
        extra.push(0);
        assert!(matches!(decode_graphs(&extra), Err(DumpError::TrailingBytes)));
    }

    #[test]
    fn huge_counts_do_not_allocate() {
        let mut bytes = GRAPH_DUMP_MAGIC.to_vec();
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&u32::MAX.to_le_bytes());
        assert!(matches!(decode_graphs(&bytes), Err(DumpError::Truncated(_))));
    }
}
