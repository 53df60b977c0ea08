//! Tokenised parallel text: one sentence per line, tokens separated by spaces.

use std::path::Path;

use crate::error::{Error, Result};
use crate::probing::MaskRecord;

/// One sentence pair and the image it describes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParallelExample {
    pub src: Vec<String>,
    pub tgt: Vec<String>,
    pub image_id: String,
    /// Masked positions of `src`, when it came out of a probing masker.
    pub masks: Vec<MaskRecord>,
}

impl ParallelExample {
    pub fn new(src: Vec<String>, tgt: Vec<String>, image_id: impl Into<String>) -> Self {
        ParallelExample {
            src,
            tgt,
            image_id: image_id.into(),
            masks: Vec::new(),
        }
    }
}

/// Default image id for a corpus line with no explicit id file.
pub fn line_image_id(line: usize) -> String {
    format!("{line:06}")
}

pub fn tokenize(line: &str) -> Vec<String> {
    line.split_whitespace().map(str::to_string).collect()
}

/// Reads UTF-8 lines, reporting the 1-based line of any invalid sequence.
pub fn read_lines(path: &Path) -> Result<Vec<String>> {
    let bytes = std::fs::read(path)?;
    let mut lines = Vec::new();
    let mut chunks: Vec<&[u8]> = bytes.split(|&b| b == b'\n').collect();
    if chunks.last().is_some_and(|c| c.is_empty()) {
        chunks.pop();
    }
    for (i, chunk) in chunks.into_iter().enumerate() {
        let chunk = chunk.strip_suffix(b"\r").unwrap_or(chunk);
        let line = std::str::from_utf8(chunk).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: format!("invalid UTF-8: {e}"),
        })?;
        lines.push(line.to_string());
    }
    Ok(lines)
}

pub fn read_tokenized(path: &Path) -> Result<Vec<Vec<String>>> {
    Ok(read_lines(path)?.iter().map(|l| tokenize(l)).collect())
}

pub fn write_tokenized<S: AsRef<str>>(path: &Path, lines: &[Vec<S>]) -> Result<()> {
    let mut out = String::new();
    for l in lines {
        for (i, t) in l.iter().enumerate() {
            if i > 0 {
                out.push(' ');
            }
            out.push_str(t.as_ref());
        }
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Reads aligned source/target files and an optional image-id file.
pub fn read_parallel(
    src: &Path,
    tgt: &Path,
    image_ids: Option<&Path>,
) -> Result<Vec<ParallelExample>> {
    let s = read_tokenized(src)?;
    let t = read_tokenized(tgt)?;
    if s.len() != t.len() {
        return Err(Error::Alignment(format!(
            "{} has {} lines but {} has {}",
            src.display(),
            s.len(),
            tgt.display(),
            t.len()
        )));
    }
    let ids = match image_ids {
        Some(p) => {
            let ids = read_lines(p)?;
            if ids.len() != s.len() {
                return Err(Error::Alignment(format!(
                    "{} has {} ids for {} sentences",
                    p.display(),
                    ids.len(),
                    s.len()
                )));
            }
            ids.into_iter().map(|l| l.trim().to_string()).collect()
        }
        None => (0..s.len()).map(line_image_id).collect::<Vec<_>>(),
    };
    Ok(s.into_iter()
        .zip(t)
        .zip(ids)
        .map(|((s, t), id)| ParallelExample::new(s, t, id))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn invalid_utf8_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.txt");
        std::fs::write(&p, b"ok line\nbad \xff byte\n").unwrap();
        match read_lines(&p) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn parallel_round_trip_with_default_ids() {
        let dir = tempfile::tempdir().unwrap();
        let (s, t) = (dir.path().join("s"), dir.path().join("t"));
        write_tokenized(&s, &[vec!["a", "b"], vec!["c"]]).unwrap();
        write_tokenized(&t, &[vec!["x"], vec!["y", "z"]]).unwrap();
        let ex = read_parallel(&s, &t, None).unwrap();
        assert_eq!(ex.len(), 2);
        assert_eq!(ex[1].tgt, vec!["y", "z"]);
        assert_eq!(ex[1].image_id, "000001");
    }

    #[test]
    fn misaligned_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let (s, t) = (dir.path().join("s"), dir.path().join("t"));
        write_tokenized(&s, &[vec!["a"], vec!["b"]]).unwrap();
        write_tokenized(&t, &[vec!["x"]]).unwrap();
        assert!(matches!(
            read_parallel(&s, &t, None),
            Err(Error::Alignment(_))
        ));
    }
}
