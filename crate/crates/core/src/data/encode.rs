//! Dense auxiliary vectors: one-hot categorical blocks followed by unit-norm text-embedding
//! blocks.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::embedding::EmbeddingProvider;
use super::merge::MergeMaps;
use super::schema::{Attribute, AttributeTuple};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum BlockKind {
    /// One column per surviving level, ascending.
    OneHot { attribute: Attribute, levels: Vec<u8> },
    Text,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuxBlock {
    pub name: String,
    pub offset: usize,
    pub width: usize,
    pub kind: BlockKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuxLayout {
    blocks: Vec<AuxBlock>,
}

impl AuxLayout {
    fn from_blocks(blocks: impl IntoIterator<Item = (String, usize, BlockKind)>) -> Self {
        let mut offset = 0;
        let blocks = blocks
            .into_iter()
            .map(|(name, width, kind)| {
                let b = AuxBlock {
                    name,
                    offset,
                    width,
                    kind,
                };
                offset += width;
                b
            })
            .collect();
        AuxLayout { blocks }
    }

    /// Categorical attributes in declaration order, then `title`, `desc`, `ocr`.
    pub fn ad_attributes(merges: &MergeMaps, text_dim: usize) -> Self {
        let categorical = Attribute::ALL.into_iter().map(|attr| {
            let levels = merges.surviving_levels(attr);
            (
                attr.name().to_owned(),
                levels.len(),
                BlockKind::OneHot {
                    attribute: attr,
                    levels,
                },
            )
        });
        let text = ["title", "desc", "ocr"]
            .into_iter()
            .map(|n| (n.to_owned(), text_dim, BlockKind::Text));
        Self::from_blocks(categorical.chain(text))
    }

    /// `slots` text blocks named `tag1`, `tag2`, ... for tag-annotated image sets.
    pub fn tags(slots: usize, text_dim: usize) -> Self {
        Self::from_blocks((1..=slots).map(|i| (format!("tag{i}"), text_dim, BlockKind::Text)))
    }

    /// Keeps only the blocks accepted by `keep`, recomputing offsets.
    pub fn retain(&self, mut keep: impl FnMut(&AuxBlock) -> bool) -> Self {
        Self::from_blocks(
            self.blocks
                .iter()
                .filter(|b| keep(b))
                .map(|b| (b.name.clone(), b.width, b.kind.clone())),
        )
    }

    pub fn blocks(&self) -> &[AuxBlock] {
        &self.blocks
    }

    pub fn block(&self, name: &str) -> Option<&AuxBlock> {
        self.blocks.iter().find(|b| b.name == name)
    }

    pub fn dim(&self) -> usize {
        self.blocks.iter().map(|b| b.width).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AuxiliaryVector {
    pub values: Vec<f64>,
    pub layout: Arc<AuxLayout>,
}

impl AuxiliaryVector {
    pub fn block(&self, name: &str) -> Option<&[f64]> {
        self.layout
            .block(name)
            .map(|b| &self.values[b.offset..b.offset + b.width])
    }
}

/// Raw attribute values of one instance, including the image-derived dominant colour.
#[derive(Debug, Clone, PartialEq)]
pub struct AuxFields<'a> {
    pub attributes: &'a AttributeTuple,
    pub domcol: u8,
}

fn write_text(dst: &mut [f64], text: &str, embedder: &dyn EmbeddingProvider) -> Result<()> {
    if text.trim().is_empty() {
        return Ok(());
    }
    let v = embedder.embed(text)?;
    if v.len() != dst.len() {
        return Err(Error::Shape(format!(
            "embedder {} returned {} components, block expects {}",
            embedder.provider_id(),
            v.len(),
            dst.len()
        )));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::invalid("embedding contains non-finite values"));
    }
    // unit norm keeps 768-wide text blocks from drowning the one-hot blocks
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = if norm > 0.0 { 1.0 / norm } else { 0.0 };
    for (d, x) in dst.iter_mut().zip(&v) {
        *d = x * scale;
    }
    Ok(())
}

/// Encodes one instance against an ad-attribute layout. Empty text leaves its block at zero.
pub fn encode_auxiliary(
    fields: &AuxFields<'_>,
    merges: &MergeMaps,
    layout: &Arc<AuxLayout>,
    embedder: &dyn EmbeddingProvider,
) -> Result<AuxiliaryVector> {
    let mut values = vec![0.0; layout.dim()];
    for block in layout.blocks() {
        let dst = &mut values[block.offset..block.offset + block.width];
        match &block.kind {
            BlockKind::OneHot { attribute, levels } => {
                let raw = match attribute {
                    Attribute::Domcol => fields.domcol,
                    a => fields.attributes.get(*a).expect("logged attribute"),
                };
                let merged = merges.map(*attribute, raw)?;
                let col = levels.iter().position(|&l| l == merged).ok_or(Error::UnknownLevel {
                    attribute: attribute.name(),
                    level: raw,
                })?;
                dst[col] = 1.0;
            }
            BlockKind::Text => {
                let text = match block.name.as_str() {
                    "title" => &fields.attributes.title,
                    "desc" => &fields.attributes.desc,
                    "ocr" => &fields.attributes.ocr,
                    other => return Err(Error::invalid(format!("text block `{other}` has no source field"))),
                };
                write_text(dst, text, embedder)?;
            }
        }
    }
    Ok(AuxiliaryVector {
        values,
        layout: Arc::clone(layout),
    })
}

/// Encodes tag texts into a tag layout; missing slots stay zero, extra tags are ignored.
pub fn encode_tags(tags: &[String], layout: &Arc<AuxLayout>, embedder: &dyn EmbeddingProvider) -> Result<AuxiliaryVector> {
    let mut values = vec![0.0; layout.dim()];
    for (block, tag) in layout.blocks().iter().zip(tags) {
        write_text(&mut values[block.offset..block.offset + block.width], tag, embedder)?;
    }
    Ok(AuxiliaryVector {
        values,
        layout: Arc::clone(layout),
    })
}
