//! Plain-text corpus files: UTF-8, one sentence per line, LF endings.
//!
//! Parallel corpora are stored as two aligned text files plus a provenance
//! file holding `source<TAB>target` labels per line.

use std::path::Path;

use crate::error::{Error, Result};

use super::{MonoCorpus, ParallelCorpus, Provenance, Sentence, SentencePair};

/// Reads a file into lines. A trailing newline does not produce an extra line.
pub fn read_lines(path: &Path) -> Result<Vec<String>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.is_empty() {
        return Ok(Vec::new());
    }
    let body = bytes.strip_suffix(b"\n").unwrap_or(&bytes);
    body.split(|&b| b == b'\n')
        .enumerate()
        .map(|(i, line)| {
            let line = line.strip_suffix(b"\r").unwrap_or(line);
            String::from_utf8(line.to_vec()).map_err(|_| Error::Encoding {
                path: path.to_path_buf(),
                line: i + 1,
            })
        })
        .collect()
}

pub fn write_lines<S: AsRef<str>>(path: &Path, lines: &[S]) -> Result<()> {
    let mut text = String::new();
    for l in lines {
        text.push_str(l.as_ref());
        text.push('\n');
    }
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_corpus(path: &Path, language: &str, provenance: Provenance) -> Result<MonoCorpus> {
    let sentences = read_lines(path)?.iter().map(|l| Sentence::from_line(l)).collect();
    Ok(MonoCorpus::new(sentences, language, provenance))
}

pub fn write_corpus(corpus: &MonoCorpus, path: &Path) -> Result<()> {
    let lines: Vec<String> = corpus.sentences.iter().map(Sentence::to_line).collect();
    write_lines(path, &lines)
}

/// Writes `<stem>.src`, `<stem>.tgt` and `<stem>.prov`.
pub fn write_parallel(corpus: &ParallelCorpus, stem: &Path) -> Result<()> {
    let src: Vec<String> = corpus.sources().map(Sentence::to_line).collect();
    let tgt: Vec<String> = corpus.targets().map(Sentence::to_line).collect();
    let prov: Vec<String> = corpus
        .pairs
        .iter()
        .map(|p| format!("{}\t{}", p.source_provenance, p.target_provenance))
        .collect();
    write_lines(&stem.with_extension("src"), &src)?;
    write_lines(&stem.with_extension("tgt"), &tgt)?;
    write_lines(&stem.with_extension("prov"), &prov)
}

/// Reads the files written by [`write_parallel`]. Without a `.prov` file, the
/// provided default provenances apply to every pair.
pub fn read_parallel(
    stem: &Path,
    source_language: &str,
    target_language: &str,
    default_provenance: Option<(Provenance, Provenance)>,
) -> Result<ParallelCorpus> {
    let src = read_lines(&stem.with_extension("src"))?;
    let tgt = read_lines(&stem.with_extension("tgt"))?;
    if src.len() != tgt.len() {
        return Err(Error::Data(format!(
            "{}: {} source lines vs {} target lines",
            stem.display(),
            src.len(),
            tgt.len()
        )));
    }
    let prov_path = stem.with_extension("prov");
    let provs: Vec<(Provenance, Provenance)> = if prov_path.exists() {
        read_lines(&prov_path)?
            .iter()
            .enumerate()
            .map(|(i, l)| {
                let (a, b) = l.split_once('\t').ok_or_else(|| {
                    Error::Data(format!("{}:{}: expected two provenance labels", prov_path.display(), i + 1))
                })?;
                Ok((a.parse()?, b.parse()?))
            })
            .collect::<Result<_>>()?
    } else {
        let d = default_provenance.ok_or_else(|| {
            Error::Data(format!("{} is missing and no default provenance given", prov_path.display()))
        })?;
        vec![d; src.len()]
    };
    if provs.len() != src.len() {
        return Err(Error::Data(format!("{}: provenance line count mismatch", prov_path.display())));
    }
    let mut corpus = ParallelCorpus::empty(source_language, target_language);
    for ((s, t), (sp, tp)) in src.iter().zip(&tgt).zip(provs) {
        corpus.push(SentencePair {
            source: Sentence::from_line(s),
            target: Sentence::from_line(t),
            source_provenance: sp,
            target_provenance: tp,
        })?;
    }
    Ok(corpus)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_empty_corpus() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.txt");
        std::fs::write(&p, "").unwrap();
        assert_eq!(read_corpus(&p, "x", Provenance::Nature).unwrap().len(), 0);
    }

    #[test]
    fn line_order_is_preserved() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.txt");
        std::fs::write(&p, "one\ntwo words\nthree\n").unwrap();
        let c = read_corpus(&p, "x", Provenance::Nature).unwrap();
        let lines: Vec<String> = c.sentences.iter().map(Sentence::to_line).collect();
        assert_eq!(lines, ["one", "two words", "three"]);
    }

    #[test]
    fn trailing_newline_does_not_matter() {
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a"), dir.path().join("b"));
        std::fs::write(&a, "x y\nz").unwrap();
        std::fs::write(&b, "x y\nz\n").unwrap();
        assert_eq!(
            read_corpus(&a, "x", Provenance::Nature).unwrap(),
            read_corpus(&b, "x", Provenance::Nature).unwrap()
        );
    }

    #[test]
    fn invalid_utf8_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad");
        std::fs::write(&p, b"fine\nalso fine\nbad \xff byte\n").unwrap();
        match read_corpus(&p, "x", Provenance::Nature) {
            Err(Error::Encoding { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected encoding error, got {other:?}"),
        }
    }

    #[test]
    fn write_then_read_is_identity() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.txt");
        let c = MonoCorpus::new(
            vec!["a b".into(), Sentence::empty(), "c".into()],
            "x",
            Provenance::Mt,
        );
        write_corpus(&c, &p).unwrap();
        assert_eq!(read_corpus(&p, "x", Provenance::Mt).unwrap(), c);
    }

    #[test]
    fn parallel_round_trip_keeps_per_pair_provenance() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = ParallelCorpus::empty("s", "t");
        c.push(SentencePair {
            source: "a".into(),
            target: "b".into(),
            source_provenance: Provenance::Nature,
            target_provenance: Provenance::Ht,
        })
        .unwrap();
        c.push(SentencePair {
            source: "c d".into(),
            target: "e".into(),
            source_provenance: Provenance::tagged(Provenance::Tst).unwrap(),
            target_provenance: Provenance::Nature,
        })
        .unwrap();
        let stem = dir.path().join("bitext");
        write_parallel(&c, &stem).unwrap();
        assert_eq!(read_parallel(&stem, "s", "t", None).unwrap(), c);
    }
}
