//! Locating and loading corpus files on disk.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::corpus::{parse_conll, Corpus, CorpusError, Split, TagScheme};

#[derive(Debug, Clone, Default)]
pub struct LoadOptions {
    /// Corpus name; defaults to the directory or file stem.
    pub name: Option<String>,
    /// Zero-based tag column; defaults to the last column of each file.
    pub tag_col: Option<usize>,
    pub scheme: TagScheme,
    /// Label order used in prompts; must be a permutation of the label set.
    pub label_order: Option<Vec<String>>,
    /// Explicit files, overriding discovery for that split.
    pub files: BTreeMap<Split, PathBuf>,
}

fn classify(name: &str) -> Option<Split> {
    let lower = name.to_ascii_lowercase();
    if lower.contains("train") {
        Some(Split::Train)
    } else if ["testa", "dev", "valid"].iter().any(|k| lower.contains(k)) {
        Some(Split::Valid)
    } else if ["testb", "test"].iter().any(|k| lower.contains(k)) {
        Some(Split::Test)
    } else {
        None
    }
}

/// Maps split names to files in `dir` by file name: `train`; `valid`, `dev`
/// or `testa`; `test` or `testb`. Hidden files are ignored. Two candidates
/// for one split is an error.
pub fn discover_splits(dir: &Path) -> Result<BTreeMap<Split, PathBuf>, CorpusError> {
    let io_err = |e: std::io::Error| CorpusError::Io {
        path: dir.display().to_string(),
        message: e.to_string(),
    };
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(io_err)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    entries.sort();
    let mut found: BTreeMap<Split, PathBuf> = BTreeMap::new();
    for path in entries {
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        if name.starts_with('.') {
            continue;
        }
        if let Some(split) = classify(name) {
            if let Some(prev) = found.get(&split) {
                return Err(CorpusError::Discovery(format!(
                    "both {} and {} look like the {split} split; pass the file explicitly",
                    prev.display(),
                    path.display()
                )));
            }
            found.insert(split, path);
        }
    }
    if found.is_empty() {
        return Err(CorpusError::Discovery(format!(
            "no train/valid/test files found in {}",
            dir.display()
        )));
    }
    Ok(found)
}

/// Column count minus one of the first data line.
pub fn last_column(raw: &str) -> Option<usize> {
    raw.lines()
        .map(str::split_whitespace)
        .map(|cols| cols.collect::<Vec<_>>())
        .find(|cols| !cols.is_empty() && cols[0] != "-DOCSTART-")
        .map(|cols| cols.len() - 1)
}

/// Loads a directory of split files, or a single file as the train split.
pub fn load_corpus(path: &Path, opts: &LoadOptions) -> Result<Corpus, CorpusError> {
    let mut files = BTreeMap::new();
    if path.is_dir() {
        files = discover_splits(path)?;
    } else if path.is_file() {
        files.insert(Split::Train, path.to_path_buf());
    } else if !path.as_os_str().is_empty() {
        return Err(CorpusError::Io {
            path: path.display().to_string(),
            message: "no such file or directory".into(),
        });
    }
    files.extend(opts.files.iter().map(|(k, v)| (*k, v.clone())));
    if files.is_empty() {
        return Err(CorpusError::Discovery("no corpus files given".into()));
    }

    let mut splits: BTreeMap<Split, Vec<_>> = BTreeMap::new();
    for (split, file) in &files {
        let raw = std::fs::read(file).map_err(|e| CorpusError::Io {
            path: file.display().to_string(),
            message: e.to_string(),
        })?;
        let raw = String::from_utf8_lossy(&raw);
        let column = match opts.tag_col {
            Some(c) => c,
            None => last_column(&raw)
                .filter(|&c| c > 0)
                .ok_or_else(|| CorpusError::Discovery(format!("{} has no tag column", file.display())))?,
        };
        let sentences = parse_conll(&raw, column, opts.scheme).map_err(|e| match e {
            CorpusError::InvalidBio { .. } | CorpusError::RaggedLine { .. } => CorpusError::InFile {
                path: file.display().to_string(),
                source: Box::new(e),
            },
            other => other,
        })?;
        splits.insert(*split, sentences);
    }
    let name = opts.name.clone().unwrap_or_else(|| {
        let base = if path.is_dir() || path.as_os_str().is_empty() {
            path
        } else {
            path.parent().unwrap_or(path)
        };
        base.file_name()
            .and_then(|n| n.to_str())
            .unwrap_or("corpus")
            .to_string()
    });
    let corpus = Corpus::new(
        name,
        splits.remove(&Split::Train),
        splits.remove(&Split::Valid),
        splits.remove(&Split::Test),
    )?;
    match &opts.label_order {
        Some(order) => corpus.with_label_order(order),
        None => Ok(corpus),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn discovers_common_layouts() {
        let dir = tempfile::tempdir().unwrap();
        for f in ["eng.train", "eng.testa", "eng.testb", "README"] {
            std::fs::write(dir.path().join(f), "EU B-ORG\n").unwrap();
        }
        let found = discover_splits(dir.path()).unwrap();
        assert_eq!(found[&Split::Train].file_name().unwrap(), "eng.train");
        assert_eq!(found[&Split::Valid].file_name().unwrap(), "eng.testa");
        assert_eq!(found[&Split::Test].file_name().unwrap(), "eng.testb");

        let dir = tempfile::tempdir().unwrap();
        for f in ["wnut17train.conll", "emerging.dev.conll", "emerging.test.annotated"] {
            std::fs::write(dir.path().join(f), "x O\n").unwrap();
        }
        assert_eq!(discover_splits(dir.path()).unwrap().len(), 3);
    }

    #[test]
    fn ambiguous_split_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        for f in ["test.txt", "test.conll"] {
            std::fs::write(dir.path().join(f), "x O\n").unwrap();
        }
        assert!(matches!(discover_splits(dir.path()), Err(CorpusError::Discovery(_))));
    }

    #[test]
    fn loads_four_column_files_with_detected_tag_column() {
        let dir = tempfile::tempdir().unwrap();
        let train = "-DOCSTART- -X- -X- O\n\nEU NNP B-NP B-ORG\nrejects VBZ B-VP O\n\n";
        let test = "Peter NNP B-NP B-PER\nBlackburn NNP I-NP I-PER\n";
        std::fs::write(dir.path().join("train.txt"), train).unwrap();
        std::fs::write(dir.path().join("test.txt"), test).unwrap();
        let c = load_corpus(dir.path(), &LoadOptions::default()).unwrap();
        assert_eq!(c.train.as_ref().unwrap().len(), 1);
        assert_eq!(c.test.as_ref().unwrap()[0].tags, ["B-PER", "I-PER"]);
        assert!(c.valid.is_none());
        assert_eq!(c.label_set, ["ORG", "PER"]);
        let opts = LoadOptions {
            label_order: Some(vec!["PER".into(), "ORG".into()]),
            ..Default::default()
        };
        assert_eq!(load_corpus(dir.path(), &opts).unwrap().label_set, ["PER", "ORG"]);
    }

    #[test]
    fn iob1_needs_the_scheme_flag() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("train.txt");
        std::fs::write(&file, "x I-PER\n").unwrap();
        assert!(load_corpus(&file, &LoadOptions::default()).is_err());
        let opts = LoadOptions {
            scheme: TagScheme::Iob1,
            ..Default::default()
        };
        assert_eq!(load_corpus(&file, &opts).unwrap().train.unwrap()[0].tags, ["B-PER"]);
    }
}
