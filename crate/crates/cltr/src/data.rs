//! Dataset loading, relevance binarization, and synthetic data generation.
//!
//! Datasets arrive in the LETOR/SVMlight text format, one document per line:
//!
//! ```text
//! <grade> qid:<id> <fid>:<value> ... [# comment]
//! ```
//!
//! Grades run 0..4 and binarize to relevant iff the grade is 3 or 4. Feature
//! ids are 1-based; ids absent from a line default to 0, following the sparse
//! convention of the public benchmark sets. Document order within a query is
//! file order, and that order defines the index used for deterministic
//! tie-breaking everywhere else.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::{Error, Result};

/// Relevance binarization: only the two highest grades count as relevant.
pub fn binarize(grade: u8) -> bool {
    grade >= 3
}

/// One query with its candidate documents, stored as a row-major feature
/// matrix of `num_docs x num_features`.
#[derive(Debug, Clone, PartialEq)]
pub struct Query {
    pub id: u32,
    features: Vec<f64>,
    num_features: usize,
    pub graded_relevance: Vec<u8>,
    pub binary_relevance: Vec<bool>,
}

impl Query {
    /// Builds a query from per-document feature rows and grades.
    pub fn new(id: u32, rows: Vec<Vec<f64>>, grades: Vec<u8>) -> Result<Self> {
        let num_features = rows.first().map_or(0, Vec::len);
        let mut features = Vec::with_capacity(rows.len() * num_features);
        for row in &rows {
            if row.len() != num_features {
                return Err(Error::DimensionMismatch {
                    expected: num_features,
                    actual: row.len(),
                });
            }
            features.extend_from_slice(row);
        }
        Self::from_flat(id, features, num_features, grades)
    }

    /// Builds a query from an already-flat feature matrix.
    pub fn from_flat(
        id: u32,
        features: Vec<f64>,
        num_features: usize,
        grades: Vec<u8>,
    ) -> Result<Self> {
        if grades.is_empty() {
            return Err(Error::Data(format!("query {id} has no documents")));
        }
        if features.len() != grades.len() * num_features {
            return Err(Error::DimensionMismatch {
                expected: grades.len() * num_features,
                actual: features.len(),
            });
        }
        if let Some(&g) = grades.iter().find(|&&g| g > 4) {
            return Err(Error::Data(format!("query {id} has grade {g} outside 0..4")));
        }
        let binary_relevance = grades.iter().map(|&g| binarize(g)).collect();
        Ok(Self {
            id,
            features,
            num_features,
            graded_relevance: grades,
            binary_relevance,
        })
    }

    pub fn num_docs(&self) -> usize {
        self.graded_relevance.len()
    }

    pub fn num_features(&self) -> usize {
        self.num_features
    }

    /// Feature row of one document.
    pub fn doc_features(&self, doc: usize) -> &[f64] {
        &self.features[doc * self.num_features..(doc + 1) * self.num_features]
    }

    pub fn num_relevant(&self) -> usize {
        self.binary_relevance.iter().filter(|&&r| r).count()
    }

    fn apply_bounds(&mut self, bounds: &[(f64, f64)]) {
        for row in self.features.chunks_mut(self.num_features) {
            for (value, &(lo, hi)) in row.iter_mut().zip(bounds) {
                *value = if hi > lo { (*value - lo) / (hi - lo) } else { 0.0 };
            }
        }
    }
}

/// An ordered set of queries; one of the train/validation/test splits.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Partition {
    pub queries: Vec<Query>,
}

impl Partition {
    pub fn num_queries(&self) -> usize {
        self.queries.len()
    }

    pub fn num_docs(&self) -> usize {
        self.queries.iter().map(Query::num_docs).sum()
    }

    /// Index of each query by id, in partition order.
    pub fn query_ids(&self) -> Vec<u32> {
        self.queries.iter().map(|q| q.id).collect()
    }
}

/// A named dataset with disjoint train/validation/test partitions sharing
/// one feature space.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub name: String,
    pub num_features: usize,
    pub train: Partition,
    pub validation: Partition,
    pub test: Partition,
}

impl Dataset {
    /// Validates the partition invariants: shared dimensionality, at least
    /// one document per query, and query ids disjoint across partitions.
    pub fn new(
        name: String,
        num_features: usize,
        train: Partition,
        validation: Partition,
        test: Partition,
    ) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        for partition in [&train, &validation, &test] {
            for query in &partition.queries {
                if query.num_features != num_features {
                    return Err(Error::DimensionMismatch {
                        expected: num_features,
                        actual: query.num_features,
                    });
                }
                if !seen.insert(query.id) {
                    return Err(Error::Data(format!(
                        "query id {} appears in more than one partition",
                        query.id
                    )));
                }
            }
        }
        Ok(Self { name, num_features, train, validation, test })
    }

    /// Per-feature min-max scaling: bounds are computed on the training
    /// partition only and applied to every partition, so validation and
    /// test values may fall outside [0, 1]. Constant features map to 0.
    pub fn normalize_min_max(&mut self) {
        let mut bounds = vec![(f64::INFINITY, f64::NEG_INFINITY); self.num_features];
        for query in &self.train.queries {
            for doc in 0..query.num_docs() {
                for (b, &v) in bounds.iter_mut().zip(query.doc_features(doc)) {
                    b.0 = b.0.min(v);
                    b.1 = b.1.max(v);
                }
            }
        }
        for partition in [&mut self.train, &mut self.validation, &mut self.test] {
            for query in &mut partition.queries {
                query.apply_bounds(&bounds);
            }
        }
    }
}

/// Parses LETOR-format lines into a partition. Documents are grouped by qid
/// in order of first appearance; document order within a query is line order.
pub fn parse_letor(reader: impl BufRead, num_features: usize) -> Result<Partition> {
    struct Pending {
        rows: Vec<f64>,
        grades: Vec<u8>,
    }
    let mut order: Vec<u32> = Vec::new();
    let mut groups: std::collections::HashMap<u32, Pending> = std::collections::HashMap::new();

    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        let content = line.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse { line: line_no, message };

        let mut tokens = content.split_ascii_whitespace();
        let grade: u8 = tokens
            .next()
            .ok_or_else(|| parse_err("missing relevance grade".into()))?
            .parse()
            .map_err(|_| parse_err("relevance grade is not an integer".into()))?;
        if grade > 4 {
            return Err(parse_err(format!("grade {grade} outside 0..4")));
        }
        let qid_token = tokens.next().ok_or_else(|| parse_err("missing qid field".into()))?;
        let qid: u32 = qid_token
            .strip_prefix("qid:")
            .ok_or_else(|| parse_err(format!("expected qid:<id>, got '{qid_token}'")))?
            .parse()
            .map_err(|_| parse_err(format!("invalid query id in '{qid_token}'")))?;

        let mut row = vec![0.0f64; num_features];
        for token in tokens {
            let (fid, value) = token
                .split_once(':')
                .ok_or_else(|| parse_err(format!("expected <fid>:<value>, got '{token}'")))?;
            let fid: usize = fid
                .parse()
                .map_err(|_| parse_err(format!("invalid feature id in '{token}'")))?;
            if fid < 1 || fid > num_features {
                return Err(Error::Schema {
                    line: line_no,
                    message: format!("feature id {fid} outside 1..{num_features}"),
                });
            }
            row[fid - 1] = value
                .parse()
                .map_err(|_| parse_err(format!("invalid feature value in '{token}'")))?;
        }

        let entry = groups.entry(qid).or_insert_with(|| {
            order.push(qid);
            Pending { rows: Vec::new(), grades: Vec::new() }
        });
        entry.rows.extend_from_slice(&row);
        entry.grades.push(grade);
    }

    let mut queries = Vec::with_capacity(order.len());
    for qid in order {
        let pending = groups.remove(&qid).unwrap();
        queries.push(Query::from_flat(qid, pending.rows, num_features, pending.grades)?);
    }
    Ok(Partition { queries })
}

/// Writes a partition back out in LETOR format, skipping zero features.
pub fn write_letor(partition: &Partition, mut writer: impl Write) -> std::io::Result<()> {
    for query in &partition.queries {
        for doc in 0..query.num_docs() {
            write!(writer, "{} qid:{}", query.graded_relevance[doc], query.id)?;
            for (i, &v) in query.doc_features(doc).iter().enumerate() {
                if v != 0.0 {
                    write!(writer, " {}:{}", i + 1, v)?;
                }
            }
            writeln!(writer)?;
        }
    }
    Ok(())
}

fn is_gzip(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "gz")
}

/// Loads one partition from a file, transparently gunzipping `.gz` paths.
pub fn load_partition(path: &Path, num_features: usize) -> Result<Partition> {
    let file = File::open(path)?;
    let reader: Box<dyn Read> = if is_gzip(path) {
        Box::new(flate2::read::GzDecoder::new(file))
    } else {
        Box::new(file)
    };
    parse_letor(BufReader::new(reader), num_features)
}

/// Saves one partition to a file, gzipping when the path ends in `.gz`.
pub fn save_partition(partition: &Partition, path: &Path) -> Result<()> {
    let file = File::create(path)?;
    if is_gzip(path) {
        let mut enc = flate2::write::GzEncoder::new(file, flate2::Compression::default());
        write_letor(partition, &mut enc)?;
        enc.finish()?;
    } else {
        write_letor(partition, BufWriter::new(file))?;
    }
    Ok(())
}

/// Loads a three-way split dataset and validates its invariants.
pub fn load_dataset(
    name: &str,
    num_features: usize,
    train: &Path,
    validation: &Path,
    test: &Path,
) -> Result<Dataset> {
    Dataset::new(
        name.to_string(),
        num_features,
        load_partition(train, num_features)?,
        load_partition(validation, num_features)?,
        load_partition(test, num_features)?,
    )
}

/// Mean shift of relevant documents along the hidden scoring direction, in
/// units of the per-feature noise. Chosen so relevance is learnable by a
/// linear model but far from separable.
const SYNTHETIC_OFFSET: f64 = 1.5;

const DIRECTION_STREAM: u64 = u64::MAX;

/// Generates a deterministic synthetic dataset. The training partition holds
/// `num_queries` queries; validation and test each hold half that (rounded
/// up). Every query gets `round(relevant_fraction * docs_per_query)` relevant
/// documents whose features are shifted by a fixed offset along a hidden unit
/// direction; all other feature mass is standard normal noise.
pub fn generate_synthetic(
    num_queries: usize,
    docs_per_query: usize,
    num_features: usize,
    relevant_fraction: f64,
    seed: u64,
) -> Result<Dataset> {
    if num_queries == 0 || docs_per_query == 0 || num_features == 0 {
        return Err(Error::Config("synthetic counts must be positive".into()));
    }
    if !(0.0..=1.0).contains(&relevant_fraction) {
        return Err(Error::Config(format!(
            "relevant_fraction {relevant_fraction} outside [0, 1]"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(DIRECTION_STREAM);
    let mut direction: Vec<f64> = (0..num_features).map(|_| rng.sample(StandardNormal)).collect();
    let norm = direction.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        direction.iter_mut().for_each(|v| *v /= norm);
    } else {
        direction[0] = 1.0;
    }

    let num_relevant = ((relevant_fraction * docs_per_query as f64).round() as usize)
        .min(docs_per_query);
    let sizes = [num_queries, num_queries.div_ceil(2), num_queries.div_ceil(2)];
    let mut next_id = 0u32;
    let mut partitions = Vec::with_capacity(3);
    for (partition_idx, &size) in sizes.iter().enumerate() {
        let mut queries = Vec::with_capacity(size);
        for query_idx in 0..size {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(((partition_idx as u64) << 32) | query_idx as u64);

            let mut features = Vec::with_capacity(docs_per_query * num_features);
            for _ in 0..docs_per_query * num_features {
                features.push(rng.sample::<f64, _>(StandardNormal));
            }
            // Fisher-Yates prefix: the first num_relevant entries are the
            // relevant documents, drawn uniformly without replacement.
            let mut docs: Vec<usize> = (0..docs_per_query).collect();
            for i in 0..num_relevant {
                let j = rng.gen_range(i..docs_per_query);
                docs.swap(i, j);
            }
            let mut grades = vec![0u8; docs_per_query];
            for (slot, &doc) in docs.iter().enumerate() {
                if slot < num_relevant {
                    for (f, &u) in features[doc * num_features..(doc + 1) * num_features]
                        .iter_mut()
                        .zip(&direction)
                    {
                        *f += SYNTHETIC_OFFSET * u;
                    }
                    grades[doc] = 3 + rng.gen_range(0..2u8);
                } else {
                    grades[doc] = rng.gen_range(0..3u8);
                }
            }
            queries.push(Query::from_flat(next_id, features, num_features, grades)?);
            next_id += 1;
        }
        partitions.push(Partition { queries });
    }
    let test = partitions.pop().unwrap();
    let validation = partitions.pop().unwrap();
    let train = partitions.pop().unwrap();
    Dataset::new(format!("synthetic-{seed}"), num_features, train, validation, test)
}
