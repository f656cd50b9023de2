use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use super::Vocabulary;
use crate::error::{Error, Result};
use crate::model::{Segment, BOS, EOS};

/// An ordered list of segments whose ids fit the model vocabularies.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ParallelCorpus {
    segments: Vec<Segment>,
}

impl ParallelCorpus {
    pub fn new(segments: Vec<Segment>) -> Result<Self> {
        if let Some(i) = segments
            .iter()
            .position(|s| s.source.is_empty() || s.target.is_empty())
        {
            return Err(Error::Data(format!("segment {i} is empty")));
        }
        Ok(Self { segments })
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Segment> {
        self.segments.iter()
    }

    /// Source plus target tokens over all segments.
    pub fn num_tokens(&self) -> usize {
        self.segments.iter().map(Segment::num_tokens).sum()
    }

    pub fn validate(&self, src_vocab: usize, tgt_vocab: usize) -> Result<()> {
        for s in &self.segments {
            for (ids, size) in [(&s.source, src_vocab), (&s.target, tgt_vocab)] {
                if let Some(&id) = ids.iter().find(|&&id| id >= size) {
                    return Err(Error::Index { index: id, size });
                }
            }
        }
        Ok(())
    }

    /// Source ids present in the corpus. The encoder never embeds a special token.
    pub fn observed_source_ids(&self) -> BTreeSet<usize> {
        self.segments
            .iter()
            .flat_map(|s| s.source.iter().copied())
            .collect()
    }

    /// Target ids present in the corpus plus BOS and EOS.
    pub fn observed_target_ids(&self) -> BTreeSet<usize> {
        let mut ids: BTreeSet<usize> = self
            .segments
            .iter()
            .flat_map(|s| s.target.iter().copied())
            .collect();
        ids.insert(BOS);
        ids.insert(EOS);
        ids
    }

    pub fn sources(&self) -> Vec<Vec<usize>> {
        self.segments.iter().map(|s| s.source.clone()).collect()
    }

    pub fn targets(&self) -> Vec<Vec<usize>> {
        self.segments.iter().map(|s| s.target.clone()).collect()
    }
}

impl FromIterator<Segment> for ParallelCorpus {
    fn from_iter<T: IntoIterator<Item = Segment>>(iter: T) -> Self {
        Self {
            segments: iter.into_iter().collect(),
        }
    }
}

impl<'a> IntoIterator for &'a ParallelCorpus {
    type Item = &'a Segment;
    type IntoIter = std::slice::Iter<'a, Segment>;

    fn into_iter(self) -> Self::IntoIter {
        self.segments.iter()
    }
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().map(str::to_string).collect())
}

/// Reads two line-aligned files; line `i` of each forms segment `i`.
pub fn load_parallel(
    source_path: &Path,
    target_path: &Path,
    src_vocab: &Vocabulary,
    tgt_vocab: &Vocabulary,
) -> Result<ParallelCorpus> {
    let src = read_lines(source_path)?;
    let tgt = read_lines(target_path)?;
    if src.len() != tgt.len() {
        return Err(Error::Data(format!(
            "{} has {} lines but {} has {}",
            source_path.display(),
            src.len(),
            target_path.display(),
            tgt.len()
        )));
    }
    let mut segments = Vec::with_capacity(src.len());
    for (i, (s, t)) in src.iter().zip(&tgt).enumerate() {
        let source = src_vocab.tokenize(s);
        let target = tgt_vocab.tokenize(t);
        if source.is_empty() || target.is_empty() {
            return Err(Error::Data(format!(
                "empty line {} in parallel corpus",
                i + 1
            )));
        }
        segments.push(Segment { source, target });
    }
    ParallelCorpus::new(segments)
}

pub fn write_parallel(
    source_path: &Path,
    target_path: &Path,
    corpus: &ParallelCorpus,
    src_vocab: &Vocabulary,
    tgt_vocab: &Vocabulary,
) -> Result<()> {
    let join = |ids: Vec<&Vec<usize>>, vocab: &Vocabulary| {
        ids.into_iter()
            .map(|s| vocab.detokenize(s) + "\n")
            .collect::<String>()
    };
    let src = join(corpus.iter().map(|s| &s.source).collect(), src_vocab);
    let tgt = join(corpus.iter().map(|s| &s.target).collect(), tgt_vocab);
    fs::write(source_path, src).map_err(|e| Error::io(source_path, e))?;
    fs::write(target_path, tgt).map_err(|e| Error::io(target_path, e))
}
