//! Triple files, vocabularies, the extended graph, and sparsity statistics.
//!
//! Input splits are UTF-8 text with one `head<TAB>relation<TAB>tail` triple
//! per line. Ids are assigned densely in first-occurrence order over the
//! train, valid, and test files, in that order.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::{stream, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Triple {
    pub head: usize,
    pub relation: usize,
    pub tail: usize,
}

impl Triple {
    pub const fn new(head: usize, relation: usize, tail: usize) -> Self {
        Self {
            head,
            relation,
            tail,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
struct Interner {
    names: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Interner {
    fn intern(&mut self, name: &str) -> usize {
        if let Some(&id) = self.ids.get(name) {
            return id;
        }
        let id = self.names.len();
        self.names.push(name.to_owned());
        self.ids.insert(name.to_owned(), id);
        id
    }
}

/// Bijection between names and dense ids for entities and relations.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Vocabulary {
    entities: Interner,
    relations: Interner,
}

impl Vocabulary {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn intern_entity(&mut self, name: &str) -> usize {
        self.entities.intern(name)
    }

    pub fn intern_relation(&mut self, name: &str) -> usize {
        self.relations.intern(name)
    }

    pub fn num_entities(&self) -> usize {
        self.entities.names.len()
    }

    pub fn num_relations(&self) -> usize {
        self.relations.names.len()
    }

    pub fn entity_id(&self, name: &str) -> Result<usize> {
        self.entities
            .ids
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownName {
                kind: "entity",
                name: name.to_owned(),
            })
    }

    pub fn relation_id(&self, name: &str) -> Result<usize> {
        self.relations
            .ids
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownName {
                kind: "relation",
                name: name.to_owned(),
            })
    }

    pub fn entity_name(&self, id: usize) -> &str {
        &self.entities.names[id]
    }

    pub fn relation_name(&self, id: usize) -> &str {
        &self.relations.names[id]
    }

    /// Display name for an extended relation id (raw, inverse, or self-loop).
    pub fn extended_relation_name(&self, id: usize) -> String {
        let m = self.num_relations();
        if id < m {
            self.relation_name(id).to_owned()
        } else if id < 2 * m {
            format!("{}_inv", self.relation_name(id - m))
        } else {
            "self_loop".to_owned()
        }
    }

    /// SHA-256 over entity then relation names in id order.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (tag, names) in [(b'E', &self.entities.names), (b'R', &self.relations.names)] {
            for n in names {
                h.update([tag]);
                h.update(n.as_bytes());
                h.update([0u8]);
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Parses one split, extending `vocab` with unseen names in file order.
pub fn load_split(path: &Path, vocab: &mut Vocabulary) -> Result<Vec<Triple>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_split(&text, path, vocab)
}

pub(crate) fn parse_split(text: &str, path: &Path, vocab: &mut Vocabulary) -> Result<Vec<Triple>> {
    let mut triples = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::Parse {
                path: path.to_owned(),
                line: i + 1,
                found: fields.len(),
            });
        }
        let head = vocab.intern_entity(fields[0]);
        let relation = vocab.intern_relation(fields[1]);
        let tail = vocab.intern_entity(fields[2]);
        triples.push(Triple::new(head, relation, tail));
    }
    Ok(triples)
}

/// Writes triples back out as tab-separated names.
pub fn export_split(path: &Path, triples: &[Triple], vocab: &Vocabulary) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for t in triples {
        writeln!(
            w,
            "{}\t{}\t{}",
            vocab.entity_name(t.head),
            vocab.relation_name(t.relation),
            vocab.entity_name(t.tail)
        )
        .map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TripleStore {
    pub train: Vec<Triple>,
    pub valid: Vec<Triple>,
    pub test: Vec<Triple>,
}

impl TripleStore {
    /// Every fact in any split, over raw relation ids.
    pub fn known_facts(&self) -> HashSet<Triple> {
        self.train
            .iter()
            .chain(&self.valid)
            .chain(&self.test)
            .copied()
            .collect()
    }

    /// Number of distinct triples shared between at least two splits.
    pub fn split_overlap(&self) -> usize {
        let train: HashSet<_> = self.train.iter().collect();
        let valid: HashSet<_> = self.valid.iter().collect();
        let test: HashSet<_> = self.test.iter().collect();
        let mut shared: HashSet<&Triple> = HashSet::new();
        shared.extend(valid.iter().filter(|t| train.contains(*t)).copied());
        shared.extend(test.iter().filter(|t| train.contains(*t) || valid.contains(*t)).copied());
        shared.len()
    }
}

/// A vocabulary together with its three splits.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Dataset {
    pub vocab: Vocabulary,
    pub store: TripleStore,
}

pub const SPLIT_FILES: [&str; 3] = ["train.txt", "valid.txt", "test.txt"];

impl Dataset {
    /// Loads `train.txt`, `valid.txt`, and `test.txt` from `dir`.
    pub fn load(dir: &Path) -> Result<Self> {
        let mut vocab = Vocabulary::new();
        let mut splits = Vec::with_capacity(3);
        for name in SPLIT_FILES {
            splits.push(load_split(&dir.join(name), &mut vocab)?);
        }
        let test = splits.pop().unwrap_or_default();
        let valid = splits.pop().unwrap_or_default();
        let train = splits.pop().unwrap_or_default();
        let store = TripleStore { train, valid, test };
        let overlap = store.split_overlap();
        if overlap > 0 {
            log::warn!("{}: {overlap} triples appear in more than one split", dir.display());
        }
        Ok(Self { vocab, store })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let splits = [&self.store.train, &self.store.valid, &self.store.test];
        for (name, triples) in SPLIT_FILES.iter().zip(splits) {
            export_split(&dir.join(name), triples, &self.vocab)?;
        }
        Ok(())
    }

    pub fn extended_graph(&self) -> Result<ExtendedGraph> {
        extend_triples(&self.store, &self.vocab)
    }
}

/// Training triples plus inverse edges and one self-loop per entity.
///
/// Relation ids: raw `r` keeps `r`, its inverse is `r + M`, and the shared
/// self-loop relation is `2M`.
#[derive(Debug, Clone)]
pub struct ExtendedGraph {
    num_entities: usize,
    num_relations: usize,
    triples: Vec<Triple>,
    src: Arc<[usize]>,
    rel: Arc<[usize]>,
    dst: Arc<[usize]>,
    neighbor_offsets: Vec<usize>,
    neighbor_edges: Vec<usize>,
    in_degree: Vec<usize>,
    out_degree: Vec<usize>,
}

pub fn extend_triples(store: &TripleStore, vocab: &Vocabulary) -> Result<ExtendedGraph> {
    if store.train.is_empty() {
        return Err(Error::Argument("training split is empty".into()));
    }
    Ok(ExtendedGraph::new(
        &store.train,
        vocab.num_entities(),
        vocab.num_relations(),
    ))
}

impl ExtendedGraph {
    pub fn new(train: &[Triple], num_entities: usize, num_relations: usize) -> Self {
        let m = num_relations;
        let mut triples = Vec::with_capacity(2 * train.len() + num_entities);
        triples.extend_from_slice(train);
        triples.extend(train.iter().map(|t| Triple::new(t.tail, t.relation + m, t.head)));
        triples.extend((0..num_entities).map(|v| Triple::new(v, 2 * m, v)));

        let mut out_degree = vec![0; num_entities];
        for t in train {
            out_degree[t.head] += 1;
        }

        let mut in_degree = vec![0; num_entities];
        for t in &triples {
            in_degree[t.tail] += 1;
        }
        let mut neighbor_offsets = Vec::with_capacity(num_entities + 1);
        neighbor_offsets.push(0);
        for d in &in_degree {
            neighbor_offsets.push(neighbor_offsets.last().unwrap() + d);
        }
        let mut cursor = neighbor_offsets.clone();
        let mut neighbor_edges = vec![0; triples.len()];
        for (e, t) in triples.iter().enumerate() {
            neighbor_edges[cursor[t.tail]] = e;
            cursor[t.tail] += 1;
        }

        let src: Arc<[usize]> = triples.iter().map(|t| t.head).collect();
        let rel: Arc<[usize]> = triples.iter().map(|t| t.relation).collect();
        let dst: Arc<[usize]> = triples.iter().map(|t| t.tail).collect();
        Self {
            num_entities,
            num_relations,
            triples,
            src,
            rel,
            dst,
            neighbor_offsets,
            neighbor_edges,
            in_degree,
            out_degree,
        }
    }

    pub fn num_entities(&self) -> usize {
        self.num_entities
    }

    /// Raw relation count `M`.
    pub fn num_relations(&self) -> usize {
        self.num_relations
    }

    /// Extended relation count `M′ = 2M + 1`.
    pub fn num_extended_relations(&self) -> usize {
        2 * self.num_relations + 1
    }

    pub fn self_loop_relation(&self) -> usize {
        2 * self.num_relations
    }

    pub fn inverse_relation(&self, r: usize) -> usize {
        let m = self.num_relations;
        match r {
            r if r < m => r + m,
            r if r < 2 * m => r - m,
            r => r,
        }
    }

    pub fn triples(&self) -> &[Triple] {
        &self.triples
    }

    pub fn num_edges(&self) -> usize {
        self.triples.len()
    }

    pub fn sources(&self) -> &Arc<[usize]> {
        &self.src
    }

    pub fn relations(&self) -> &Arc<[usize]> {
        &self.rel
    }

    pub fn targets(&self) -> &Arc<[usize]> {
        &self.dst
    }

    /// Edge indices (into [`Self::triples`]) whose tail is `t`.
    pub fn incoming_edges(&self, t: usize) -> &[usize] {
        &self.neighbor_edges[self.neighbor_offsets[t]..self.neighbor_offsets[t + 1]]
    }

    /// `N_t`: the `(source, relation)` pairs feeding entity `t`.
    pub fn neighbors(&self, t: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.incoming_edges(t).iter().map(|&e| {
            let tr = self.triples[e];
            (tr.head, tr.relation)
        })
    }

    /// Degrees in the extended graph, `|N_t|`; at least 1 for every entity.
    pub fn degrees(&self) -> &[usize] {
        &self.in_degree
    }

    /// Out-degrees over the raw training triples.
    pub fn raw_out_degrees(&self) -> &[usize] {
        &self.out_degree
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DegreeReport {
    pub entities: usize,
    pub relations: usize,
    pub train: usize,
    pub valid: usize,
    pub test: usize,
    /// `|T_train| / N`, zero out-degree entities included.
    pub average_out_degree: f64,
    /// Median of the per-entity out-degree multiset, zeros included.
    pub median_out_degree: f64,
    /// Entities with at least one outgoing training triple.
    pub head_entities: usize,
    pub average_out_degree_heads: f64,
    pub median_out_degree_heads: f64,
}

impl DegreeReport {
    pub fn total(&self) -> usize {
        self.train + self.valid + self.test
    }

    /// `key=value` lines.
    pub fn to_key_values(&self) -> String {
        format!(
            "entities={}\nrelations={}\ntrain={}\nvalid={}\ntest={}\ntotal={}\n\
             average_out_degree={:.4}\nmedian_out_degree={}\nhead_entities={}\n\
             average_out_degree_heads={:.4}\nmedian_out_degree_heads={}\n",
            self.entities,
            self.relations,
            self.train,
            self.valid,
            self.test,
            self.total(),
            self.average_out_degree,
            self.median_out_degree,
            self.head_entities,
            self.average_out_degree_heads,
            self.median_out_degree_heads,
        )
    }
}

impl fmt::Display for DegreeReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<26}{:>12}", "entities", self.entities)?;
        writeln!(f, "{:<26}{:>12}", "relations", self.relations)?;
        writeln!(f, "{:<26}{:>12}", "train triples", self.train)?;
        writeln!(f, "{:<26}{:>12}", "valid triples", self.valid)?;
        writeln!(f, "{:<26}{:>12}", "test triples", self.test)?;
        writeln!(f, "{:<26}{:>12}", "total triples", self.total())?;
        writeln!(f, "{:<26}{:>12.2}", "average out-degree", self.average_out_degree)?;
        writeln!(f, "{:<26}{:>12}", "median out-degree", self.median_out_degree)?;
        writeln!(f, "{:<26}{:>12}", "entities with out-edges", self.head_entities)?;
        writeln!(f, "{:<26}{:>12.2}", "  average (heads only)", self.average_out_degree_heads)?;
        write!(f, "{:<26}{:>12}", "  median (heads only)", self.median_out_degree_heads)
    }
}

fn median(values: &mut [usize]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.sort_unstable();
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2] as f64
    } else {
        (values[n / 2 - 1] + values[n / 2]) as f64 / 2.0
    }
}

pub fn degree_report(store: &TripleStore, vocab: &Vocabulary) -> DegreeReport {
    let n = vocab.num_entities();
    let mut out = vec![0usize; n];
    for t in &store.train {
        out[t.head] += 1;
    }
    let mut heads: Vec<usize> = out.iter().copied().filter(|&d| d > 0).collect();
    let head_entities = heads.len();
    DegreeReport {
        entities: n,
        relations: vocab.num_relations(),
        train: store.train.len(),
        valid: store.valid.len(),
        test: store.test.len(),
        average_out_degree: if n == 0 {
            0.0
        } else {
            store.train.len() as f64 / n as f64
        },
        median_out_degree: median(&mut out),
        head_entities,
        average_out_degree_heads: if head_entities == 0 {
            0.0
        } else {
            store.train.len() as f64 / head_entities as f64
        },
        median_out_degree_heads: median(&mut heads),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparsifyReport {
    pub original_train: usize,
    pub kept_train: usize,
    /// Entities with no triple in the kept training split.
    pub entities_absent_from_train: usize,
    pub relations_absent_from_train: usize,
    /// Valid/test triples touching an entity or relation absent from train.
    pub valid_uncovered: usize,
    pub test_uncovered: usize,
}

/// Keeps `floor(keep_fraction · |train|)` training triples sampled uniformly
/// without replacement; valid and test pass through unchanged.
pub fn sparsify_subset(
    store: &TripleStore,
    vocab: &Vocabulary,
    keep_fraction: f64,
    seed: u64,
) -> Result<(TripleStore, SparsifyReport)> {
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return Err(Error::Argument(format!(
            "keep fraction must lie in (0, 1], got {keep_fraction}"
        )));
    }
    let n = store.train.len();
    let keep = (keep_fraction * n as f64).floor() as usize;
    let mut rng = stream(seed, Stream::Sparsify);
    let mut picked = sample(&mut rng, n, keep).into_vec();
    picked.sort_unstable();
    let train: Vec<Triple> = picked.into_iter().map(|i| store.train[i]).collect();

    let mut ent_seen = vec![false; vocab.num_entities()];
    let mut rel_seen = vec![false; vocab.num_relations()];
    for t in &train {
        ent_seen[t.head] = true;
        ent_seen[t.tail] = true;
        rel_seen[t.relation] = true;
    }
    let uncovered = |ts: &[Triple]| {
        ts.iter()
            .filter(|t| !ent_seen[t.head] || !ent_seen[t.tail] || !rel_seen[t.relation])
            .count()
    };
    let report = SparsifyReport {
        original_train: n,
        kept_train: train.len(),
        entities_absent_from_train: ent_seen.iter().filter(|s| !**s).count(),
        relations_absent_from_train: rel_seen.iter().filter(|s| !**s).count(),
        valid_uncovered: uncovered(&store.valid),
        test_uncovered: uncovered(&store.test),
    };
    Ok((
        TripleStore {
            train,
            valid: store.valid.clone(),
            test: store.test.clone(),
        },
        report,
    ))
}
