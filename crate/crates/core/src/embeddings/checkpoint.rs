//! Checkpoint layout: a textual header terminated by a blank line, followed
//! by little-endian `f32` payload in row-major order: entity real, entity
//! imaginary, relation real, relation imaginary.
//!
//! ```text
//! embrag-complex v1
//! rank 16
//! entities 500
//! relations 10
//! seed 42
//! trained_epochs 120
//! payload_bytes 326400
//! checksum sha256:<hex>
//!
//! <payload>
//! ```

use std::io::{BufRead, Write};

use sha2::{Digest, Sha256};

use super::{ComplexEmbeddings, EmbeddingError};
use crate::graph::KnowledgeGraph;

const MAGIC: &str = "embrag-complex v1";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CheckpointHeader {
    pub rank: usize,
    pub entities: usize,
    pub relations: usize,
    pub seed: u64,
    pub trained_epochs: usize,
    pub payload_bytes: usize,
    pub checksum: String,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn save<W: Write>(embeddings: &ComplexEmbeddings<f32>, mut out: W) -> Result<(), EmbeddingError> {
    let mut payload = Vec::new();
    for table in embeddings.tables() {
        for x in table {
            payload.extend_from_slice(&x.to_le_bytes());
        }
    }
    let checksum = hex(&Sha256::digest(&payload));
    writeln!(out, "{MAGIC}")?;
    writeln!(out, "rank {}", embeddings.rank())?;
    writeln!(out, "entities {}", embeddings.entity_count())?;
    writeln!(out, "relations {}", embeddings.relation_count())?;
    writeln!(out, "seed {}", embeddings.seed())?;
    writeln!(out, "trained_epochs {}", embeddings.trained_epochs())?;
    writeln!(out, "payload_bytes {}", payload.len())?;
    writeln!(out, "checksum sha256:{checksum}")?;
    writeln!(out)?;
    out.write_all(&payload)?;
    out.flush()?;
    Ok(())
}

fn read_header<R: BufRead>(source: &mut R) -> Result<CheckpointHeader, EmbeddingError> {
    let bad = |m: String| EmbeddingError::Checkpoint(m);
    let mut line = String::new();
    source.read_line(&mut line)?;
    if line.trim_end() != MAGIC {
        return Err(bad("missing checkpoint magic line".into()));
    }
    let mut fields = std::collections::HashMap::new();
    loop {
        line.clear();
        if source.read_line(&mut line)? == 0 {
            return Err(bad("header ended before the blank separator line".into()));
        }
        let trimmed = line.trim_end_matches(['\n', '\r']);
        if trimmed.is_empty() {
            break;
        }
        let (key, value) = trimmed
            .split_once(' ')
            .ok_or_else(|| bad(format!("malformed header line `{trimmed}`")))?;
        fields.insert(key.to_owned(), value.to_owned());
    }
    let take = |key: &str| -> Result<String, EmbeddingError> {
        fields
            .get(key)
            .cloned()
            .ok_or_else(|| EmbeddingError::Checkpoint(format!("header field `{key}` missing")))
    };
    let number = |key: &str| -> Result<usize, EmbeddingError> {
        take(key)?
            .parse()
            .map_err(|_| EmbeddingError::Checkpoint(format!("header field `{key}` is not a number")))
    };
    let checksum = take("checksum")?;
    let checksum = checksum
        .strip_prefix("sha256:")
        .ok_or_else(|| bad("unsupported checksum algorithm".into()))?
        .to_owned();
    Ok(CheckpointHeader {
        rank: number("rank")?,
        entities: number("entities")?,
        relations: number("relations")?,
        seed: take("seed")?
            .parse()
            .map_err(|_| bad("header field `seed` is not a number".into()))?,
        trained_epochs: number("trained_epochs")?,
        payload_bytes: number("payload_bytes")?,
        checksum,
    })
}

pub fn load<R: BufRead>(mut source: R) -> Result<ComplexEmbeddings<f32>, EmbeddingError> {
    let header = read_header(&mut source)?;
    if header.rank == 0 {
        return Err(EmbeddingError::DimensionMismatch("rank is zero".into()));
    }
    let expected = 4 * header.rank * 2 * (header.entities + header.relations);
    if expected != header.payload_bytes {
        return Err(EmbeddingError::DimensionMismatch(format!(
            "rank {} with {} entities and {} relations needs {expected} bytes, header declares {}",
            header.rank, header.entities, header.relations, header.payload_bytes
        )));
    }
    let mut payload = Vec::with_capacity(expected);
    source.read_to_end(&mut payload)?;
    if payload.len() < expected {
        return Err(EmbeddingError::Checkpoint(format!(
            "truncated payload: {} of {expected} bytes",
            payload.len()
        )));
    }
    if payload.len() > expected {
        return Err(EmbeddingError::DimensionMismatch(format!(
            "{} trailing bytes after payload",
            payload.len() - expected
        )));
    }
    if hex(&Sha256::digest(&payload)) != header.checksum {
        return Err(EmbeddingError::ChecksumMismatch);
    }
    let values: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let e = header.entities * header.rank;
    let r = header.relations * header.rank;
    let tables = [
        values[..e].to_vec(),
        values[e..2 * e].to_vec(),
        values[2 * e..2 * e + r].to_vec(),
        values[2 * e + r..].to_vec(),
    ];
    Ok(ComplexEmbeddings::from_parts(header.rank, tables, header.seed, header.trained_epochs))
}

/// Loads a checkpoint and checks it against the graph's vocabularies.
pub fn load_for_graph<R: BufRead>(source: R, graph: &KnowledgeGraph) -> Result<ComplexEmbeddings<f32>, EmbeddingError> {
    let emb = load(source)?;
    if emb.entity_count() != graph.entity_count() || emb.relation_count() != graph.relation_count() {
        return Err(EmbeddingError::DimensionMismatch(format!(
            "checkpoint has {} entities / {} relations, graph has {} / {}",
            emb.entity_count(),
            emb.relation_count(),
            graph.entity_count(),
            graph.relation_count()
        )));
    }
    Ok(emb)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ComplexEmbeddings<f32> {
        let mut emb = ComplexEmbeddings::<f32>::init_sized(5, 3, 4, 17).unwrap();
        emb.set_trained_epochs(12);
        emb
    }

    fn bytes(emb: &ComplexEmbeddings<f32>) -> Vec<u8> {
        let mut buf = Vec::new();
        save(emb, &mut buf).unwrap();
        buf
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let emb = sample();
        let back = load(bytes(&emb).as_slice()).unwrap();
        assert_eq!(back, emb);
        let again = bytes(&back);
        assert_eq!(again, bytes(&emb));
    }

    #[test]
    fn truncated_file() {
        let buf = bytes(&sample());
        let cut = &buf[..buf.len() - 3];
        assert!(matches!(load(cut), Err(EmbeddingError::Checkpoint(_))));
        let header_only = &buf[..20];
        assert!(load(header_only).is_err());
    }

    #[test]
    fn rank_mismatch() {
        let text = bytes(&sample());
        let pos = text.windows(6).position(|w| w == b"rank 4").unwrap();
        let mut edited = text.clone();
        edited[pos + 5] = b'8';
        assert!(matches!(load(edited.as_slice()), Err(EmbeddingError::DimensionMismatch(_))));
    }

    #[test]
    fn corrupted_payload() {
        let mut buf = bytes(&sample());
        let last = buf.len() - 1;
        buf[last] ^= 0xff;
        assert!(matches!(load(buf.as_slice()), Err(EmbeddingError::ChecksumMismatch)));
    }

    #[test]
    fn graph_dimension_check() {
        let g = crate::graph::load_triples("a\tr\tb\n".as_bytes()).unwrap();
        let buf = bytes(&sample());
        assert!(matches!(load_for_graph(buf.as_slice(), &g), Err(EmbeddingError::DimensionMismatch(_))));
    }
}
