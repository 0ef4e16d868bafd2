use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{DataError, RawExample};

/// How a split cap picks its examples.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum CapSelection {
    /// The first `cap` records in file order.
    #[default]
    First,
    /// A seeded uniform sample of `cap` records, returned in file order.
    Seeded(u64),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct LoadOptions {
    pub cap: Option<usize>,
    pub selection: CapSelection,
}

/// Reads one record per line, stopping after `cap` records. Blank lines are
/// skipped.
pub fn load_jsonl(path: impl AsRef<Path>, cap: Option<usize>) -> Result<Vec<RawExample>, DataError> {
    load_jsonl_with(
        path,
        LoadOptions {
            cap,
            selection: CapSelection::First,
        },
    )
}

pub fn load_jsonl_with(
    path: impl AsRef<Path>,
    opts: LoadOptions,
) -> Result<Vec<RawExample>, DataError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let first_n = match opts.selection {
        CapSelection::First => opts.cap,
        CapSelection::Seeded(_) => None,
    };
    let all = read_records(BufReader::new(file), path, first_n)?;
    Ok(match (opts.selection, opts.cap) {
        (CapSelection::Seeded(seed), Some(cap)) if cap < all.len() => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut picked = sample(&mut rng, all.len(), cap).into_vec();
            picked.sort_unstable();
            picked.into_iter().map(|i| all[i].clone()).collect()
        }
        _ => all,
    })
}

/// Parses records from an in-memory string; `origin` names the source in
/// error messages.
pub fn parse_jsonl(content: &str, origin: &Path) -> Result<Vec<RawExample>, DataError> {
    read_records(content.as_bytes(), origin, None)
}

fn read_records(
    reader: impl BufRead,
    path: &Path,
    cap: Option<usize>,
) -> Result<Vec<RawExample>, DataError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        if cap.is_some_and(|c| out.len() >= c) {
            break;
        }
        let line_no = i + 1;
        let line = line.map_err(|source| DataError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let ex: RawExample = serde_json::from_str(&line).map_err(|e| DataError::Parse {
            path: path.to_path_buf(),
            line: line_no,
            message: e.to_string(),
        })?;
        ex.validate().map_err(|e| DataError::Invalid {
            path: path.to_path_buf(),
            line: line_no,
            source: Box::new(e),
        })?;
        out.push(ex);
    }
    Ok(out)
}
