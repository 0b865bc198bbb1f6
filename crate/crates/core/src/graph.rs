//! Immutable in-memory knowledge graph.
//!
//! Entities and relations are interned into dense ids in first-appearance
//! order. Adjacency is indexed both by `(head, relation)` for traversal and
//! per entity for walk enumeration. Inverse relations are materialized as
//! real triples by [`KnowledgeGraph::with_inverses`]: relation `r` with
//! base index `i` gets the inverse `i + base_relation_count`, spelled
//! `r^{-1}`.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::io::{BufRead, Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Suffix appended to a relation surface to name its inverse.
pub const INVERSE_SUFFIX: &str = "^{-1}";

const MANIFEST_PREFIX: &str = "# embrag-graph ";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EntityId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RelationId(pub u32);

impl EntityId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl RelationId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for EntityId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "e{}", self.0)
    }
}

impl fmt::Display for RelationId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "r{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Triple {
    pub head: EntityId,
    pub relation: RelationId,
    pub tail: EntityId,
}

impl Triple {
    pub fn new(head: EntityId, relation: RelationId, tail: EntityId) -> Self {
        Self {
            head,
            relation,
            tail,
        }
    }
}

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("line {line}: expected 3 tab-separated fields, found {found}")]
    FieldCount { line: usize, found: usize },
    #[error("line {line}: empty {field} field")]
    EmptyField { line: usize, field: &'static str },
    #[error("entity id {0} out of range")]
    EntityOutOfRange(u32),
    #[error("relation id {0} out of range")]
    RelationOutOfRange(u32),
    #[error("graph already contains inverse relations")]
    AlreadyAugmented,
    #[error("inverse surface `{0}` collides with an existing relation")]
    InverseCollision(String),
    #[error("graph manifest: {0}")]
    Manifest(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    entities: usize,
    relations: usize,
    base_relations: usize,
    augmented: bool,
    triples: usize,
    entity_vocab: Vec<String>,
    relation_vocab: Vec<String>,
}

/// Summary counts, printed by the build stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphStats {
    pub entities: usize,
    pub relations: usize,
    pub triples: usize,
    pub augmented: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KnowledgeGraph {
    entities: Vec<String>,
    entity_index: HashMap<String, EntityId>,
    relations: Vec<String>,
    relation_index: HashMap<String, RelationId>,
    base_relations: usize,
    augmented: bool,
    triples: Vec<Triple>,
    out_index: HashMap<(EntityId, RelationId), Vec<EntityId>>,
    out_edges: Vec<Vec<(RelationId, EntityId)>>,
    in_edges: Vec<Vec<(RelationId, EntityId)>>,
}

/// Incremental construction with interning and deduplication.
#[derive(Debug, Default)]
pub struct GraphBuilder {
    entities: Vec<String>,
    entity_index: HashMap<String, EntityId>,
    relations: Vec<String>,
    relation_index: HashMap<String, RelationId>,
    triples: Vec<Triple>,
    seen: HashSet<Triple>,
}

impl GraphBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn entity(&mut self, surface: &str) -> EntityId {
        if let Some(&id) = self.entity_index.get(surface) {
            return id;
        }
        let id = EntityId(self.entities.len() as u32);
        self.entities.push(surface.to_owned());
        self.entity_index.insert(surface.to_owned(), id);
        id
    }

    pub fn relation(&mut self, surface: &str) -> RelationId {
        if let Some(&id) = self.relation_index.get(surface) {
            return id;
        }
        let id = RelationId(self.relations.len() as u32);
        self.relations.push(surface.to_owned());
        self.relation_index.insert(surface.to_owned(), id);
        id
    }

    /// Returns false when the triple was already present.
    pub fn add(&mut self, head: &str, relation: &str, tail: &str) -> bool {
        let h = self.entity(head);
        let r = self.relation(relation);
        let t = self.entity(tail);
        self.add_ids(Triple::new(h, r, t))
    }

    fn add_ids(&mut self, triple: Triple) -> bool {
        if self.seen.insert(triple) {
            self.triples.push(triple);
            true
        } else {
            false
        }
    }

    pub fn build(self) -> KnowledgeGraph {
        let base = self.relations.len();
        KnowledgeGraph::assemble(
            self.entities,
            self.entity_index,
            self.relations,
            self.relation_index,
            base,
            false,
            self.triples,
        )
    }
}

impl KnowledgeGraph {
    fn assemble(
        entities: Vec<String>,
        entity_index: HashMap<String, EntityId>,
        relations: Vec<String>,
        relation_index: HashMap<String, RelationId>,
        base_relations: usize,
        augmented: bool,
        triples: Vec<Triple>,
    ) -> Self {
        let n = entities.len();
        let mut out_index: HashMap<(EntityId, RelationId), Vec<EntityId>> = HashMap::new();
        let mut out_edges = vec![Vec::new(); n];
        let mut in_edges = vec![Vec::new(); n];
        for t in &triples {
            out_index.entry((t.head, t.relation)).or_default().push(t.tail);
            out_edges[t.head.index()].push((t.relation, t.tail));
            in_edges[t.tail.index()].push((t.relation, t.head));
        }
        for tails in out_index.values_mut() {
            tails.sort_unstable();
        }
        for list in out_edges.iter_mut().chain(in_edges.iter_mut()) {
            list.sort_unstable();
        }
        Self {
            entities,
            entity_index,
            relations,
            relation_index,
            base_relations,
            augmented,
            triples,
            out_index,
            out_edges,
            in_edges,
        }
    }

    pub fn entity_count(&self) -> usize {
        self.entities.len()
    }

    pub fn relation_count(&self) -> usize {
        self.relations.len()
    }

    pub fn triple_count(&self) -> usize {
        self.triples.len()
    }

    pub fn base_relation_count(&self) -> usize {
        self.base_relations
    }

    pub fn is_augmented(&self) -> bool {
        self.augmented
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }

    pub fn stats(&self) -> GraphStats {
        GraphStats {
            entities: self.entity_count(),
            relations: self.relation_count(),
            triples: self.triple_count(),
            augmented: self.augmented,
        }
    }

    /// Triples in insertion order.
    pub fn triples(&self) -> &[Triple] {
        &self.triples
    }

    pub fn entity_id(&self, surface: &str) -> Option<EntityId> {
        self.entity_index.get(surface).copied()
    }

    pub fn relation_id(&self, surface: &str) -> Option<RelationId> {
        self.relation_index.get(surface).copied()
    }

    pub fn entity_name(&self, id: EntityId) -> &str {
        &self.entities[id.index()]
    }

    pub fn relation_name(&self, id: RelationId) -> &str {
        &self.relations[id.index()]
    }

    pub fn entity_names(&self) -> &[String] {
        &self.entities
    }

    pub fn relation_names(&self) -> &[String] {
        &self.relations
    }

    pub fn entity_ids(&self) -> impl Iterator<Item = EntityId> {
        (0..self.entities.len() as u32).map(EntityId)
    }

    pub fn relation_ids(&self) -> impl Iterator<Item = RelationId> {
        (0..self.relations.len() as u32).map(RelationId)
    }

    pub fn check_entity(&self, id: EntityId) -> Result<(), GraphError> {
        if id.index() < self.entities.len() {
            Ok(())
        } else {
            Err(GraphError::EntityOutOfRange(id.0))
        }
    }

    pub fn check_relation(&self, id: RelationId) -> Result<(), GraphError> {
        if id.index() < self.relations.len() {
            Ok(())
        } else {
            Err(GraphError::RelationOutOfRange(id.0))
        }
    }

    pub fn is_inverse(&self, r: RelationId) -> bool {
        self.augmented && r.index() >= self.base_relations
    }

    /// The inverse of `r`, when the graph carries inverse relations.
    pub fn inverse(&self, r: RelationId) -> Option<RelationId> {
        if !self.augmented || r.index() >= self.relations.len() {
            return None;
        }
        let b = self.base_relations as u32;
        Some(if r.0 >= b { RelationId(r.0 - b) } else { RelationId(r.0 + b) })
    }

    /// Tails reachable from `entity` via `relation`, ascending by id.
    pub fn neighbors(&self, entity: EntityId, relation: RelationId) -> Result<&[EntityId], GraphError> {
        self.check_entity(entity)?;
        self.check_relation(relation)?;
        Ok(self.neighbors_unchecked(entity, relation))
    }

    pub(crate) fn neighbors_unchecked(&self, entity: EntityId, relation: RelationId) -> &[EntityId] {
        self.out_index
            .get(&(entity, relation))
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    pub fn has_triple(&self, head: EntityId, relation: RelationId, tail: EntityId) -> Result<bool, GraphError> {
        self.check_entity(head)?;
        self.check_relation(relation)?;
        self.check_entity(tail)?;
        Ok(self.contains(head, relation, tail))
    }

    pub(crate) fn contains(&self, head: EntityId, relation: RelationId, tail: EntityId) -> bool {
        self.neighbors_unchecked(head, relation).binary_search(&tail).is_ok()
    }

    /// Outgoing `(relation, tail)` pairs of `entity`, sorted.
    pub fn edges_from(&self, entity: EntityId) -> &[(RelationId, EntityId)] {
        &self.out_edges[entity.index()]
    }

    /// Incoming `(relation, head)` pairs of `entity`, sorted.
    pub fn edges_into(&self, entity: EntityId) -> &[(RelationId, EntityId)] {
        &self.in_edges[entity.index()]
    }

    /// Number of `(head, relation)` keys in the traversal index.
    pub fn index_key_count(&self) -> usize {
        self.out_index.len()
    }

    /// Returns a new graph in which every `(h, r, t)` is accompanied by
    /// `(t, r^{-1}, h)`.
    pub fn with_inverses(&self) -> Result<KnowledgeGraph, GraphError> {
        if self.augmented {
            return Err(GraphError::AlreadyAugmented);
        }
        let base = self.relations.len();
        let mut relations = self.relations.clone();
        let mut relation_index = self.relation_index.clone();
        for (i, name) in self.relations.iter().enumerate() {
            let inverse = format!("{name}{INVERSE_SUFFIX}");
            if relation_index.contains_key(&inverse) {
                return Err(GraphError::InverseCollision(inverse));
            }
            relation_index.insert(inverse.clone(), RelationId((base + i) as u32));
            relations.push(inverse);
        }
        let mut triples = self.triples.clone();
        triples.extend(self.triples.iter().map(|t| {
            Triple::new(t.tail, RelationId(t.relation.0 + base as u32), t.head)
        }));
        Ok(Self::assemble(
            self.entities.clone(),
            self.entity_index.clone(),
            relations,
            relation_index,
            base,
            true,
            triples,
        ))
    }

    /// Writes the manifest line followed by the triple list as TSV. The
    /// manifest is a `#` comment, so the output is also a plain triple file.
    pub fn write_to<W: Write>(&self, mut out: W) -> Result<(), GraphError> {
        let manifest = Manifest {
            version: 1,
            entities: self.entity_count(),
            relations: self.relation_count(),
            base_relations: self.base_relations,
            augmented: self.augmented,
            triples: self.triple_count(),
            entity_vocab: self.entities.clone(),
            relation_vocab: self.relations.clone(),
        };
        let json = serde_json::to_string(&manifest).map_err(|e| GraphError::Manifest(e.to_string()))?;
        writeln!(out, "{MANIFEST_PREFIX}{json}")?;
        for t in &self.triples {
            writeln!(
                out,
                "{}\t{}\t{}",
                self.entity_name(t.head),
                self.relation_name(t.relation),
                self.entity_name(t.tail)
            )?;
        }
        out.flush()?;
        Ok(())
    }

    /// Reads either a serialized graph (manifest + triples) or a plain
    /// triple file.
    pub fn read_from<R: BufRead>(mut source: R) -> Result<KnowledgeGraph, GraphError> {
        let mut first = String::new();
        source.read_line(&mut first)?;
        let Some(json) = first.strip_prefix(MANIFEST_PREFIX) else {
            let chained = std::io::Cursor::new(first.into_bytes()).chain(source);
            return load_triples(chained);
        };
        let manifest: Manifest =
            serde_json::from_str(json.trim_end()).map_err(|e| GraphError::Manifest(e.to_string()))?;
        if manifest.version != 1 {
            return Err(GraphError::Manifest(format!("unsupported version {}", manifest.version)));
        }
        if manifest.entity_vocab.len() != manifest.entities || manifest.relation_vocab.len() != manifest.relations {
            return Err(GraphError::Manifest("vocabulary size does not match counts".into()));
        }
        let mut builder = GraphBuilder::new();
        for e in &manifest.entity_vocab {
            builder.entity(e);
        }
        for r in &manifest.relation_vocab {
            builder.relation(r);
        }
        if builder.entities.len() != manifest.entities || builder.relations.len() != manifest.relations {
            return Err(GraphError::Manifest("duplicate vocabulary entries".into()));
        }
        parse_lines(source, 1, &mut builder)?;
        if builder.entities.len() != manifest.entities || builder.relations.len() != manifest.relations {
            return Err(GraphError::Manifest("triples reference symbols missing from the vocabulary".into()));
        }
        if builder.triples.len() != manifest.triples {
            return Err(GraphError::Manifest(format!(
                "expected {} triples, found {}",
                manifest.triples,
                builder.triples.len()
            )));
        }
        if manifest.augmented && manifest.relations != 2 * manifest.base_relations {
            return Err(GraphError::Manifest("augmented graph must have twice the base relations".into()));
        }
        Ok(Self::assemble(
            builder.entities,
            builder.entity_index,
            builder.relations,
            builder.relation_index,
            manifest.base_relations,
            manifest.augmented,
            builder.triples,
        ))
    }
}

/// Parses `head<TAB>relation<TAB>tail` lines. Blank lines and lines starting
/// with `#` are skipped; duplicates collapse.
pub fn load_triples<R: BufRead>(source: R) -> Result<KnowledgeGraph, GraphError> {
    let mut builder = GraphBuilder::new();
    parse_lines(source, 0, &mut builder)?;
    Ok(builder.build())
}

fn parse_lines<R: BufRead>(source: R, line_offset: usize, builder: &mut GraphBuilder) -> Result<(), GraphError> {
    for (i, line) in source.lines().enumerate() {
        let line = line?;
        let lineno = i + 1 + line_offset;
        let line = line.trim_end_matches(['\r', '\n']);
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(GraphError::FieldCount {
                line: lineno,
                found: fields.len(),
            });
        }
        for (field, name) in fields.iter().zip(["head", "relation", "tail"]) {
            if field.is_empty() {
                return Err(GraphError::EmptyField { line: lineno, field: name });
            }
        }
        builder.add(fields[0], fields[1], fields[2]);
    }
    Ok(())
}
