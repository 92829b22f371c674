use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AnnotatedImage, ClassVocabulary, Instance};
use crate::error::{Error, Result};
use crate::geometry::BBox;

#[derive(Debug, Serialize, Deserialize)]
struct CocoDocument {
    images: Vec<CocoImage>,
    annotations: Vec<CocoAnnotation>,
    categories: Vec<CocoCategory>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CocoImage {
    id: u64,
    width: usize,
    height: usize,
    #[serde(default)]
    file_name: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct CocoAnnotation {
    id: u64,
    image_id: u64,
    category_id: u64,
    bbox: [f64; 4],
    #[serde(default)]
    area: f64,
    #[serde(default)]
    iscrowd: u8,
}

#[derive(Debug, Serialize, Deserialize)]
struct CocoCategory {
    id: u64,
    name: String,
    #[serde(default)]
    supercategory: String,
}

/// Annotations of one image as stored in a COCO document (no pixels).
#[derive(Clone, Debug, PartialEq)]
pub struct CocoImageRecord {
    pub image_id: u64,
    pub width: usize,
    pub height: usize,
    pub file_name: String,
    pub instances: Vec<Instance>,
}

impl From<&AnnotatedImage> for CocoImageRecord {
    fn from(img: &AnnotatedImage) -> Self {
        Self {
            image_id: img.image_id,
            width: img.width(),
            height: img.height(),
            file_name: format!("{:08}.png", img.image_id),
            instances: img.instances.clone(),
        }
    }
}

/// Category ids are joint class indices plus one.
pub fn write_coco_annotations<'a>(
    images: impl IntoIterator<Item = &'a AnnotatedImage>,
    vocab: &ClassVocabulary,
    path: &Path,
) -> Result<()> {
    let records: Vec<CocoImageRecord> = images.into_iter().map(CocoImageRecord::from).collect();
    let mut doc = CocoDocument {
        images: Vec::with_capacity(records.len()),
        annotations: Vec::new(),
        categories: vocab
            .foreground_indices()
            .map(|c| CocoCategory {
                id: c as u64 + 1,
                name: vocab.name_of(c).unwrap_or_default().to_string(),
                supercategory: if vocab.is_base(c) { "base" } else { "novel" }.to_string(),
            })
            .collect(),
    };
    for rec in &records {
        doc.images.push(CocoImage {
            id: rec.image_id,
            width: rec.width,
            height: rec.height,
            file_name: rec.file_name.clone(),
        });
        for inst in &rec.instances {
            doc.annotations.push(CocoAnnotation {
                id: doc.annotations.len() as u64 + 1,
                image_id: rec.image_id,
                category_id: inst.class_index as u64 + 1,
                bbox: inst.bbox.to_xywh(),
                area: inst.bbox.area(),
                iscrowd: 0,
            });
        }
    }
    let text = serde_json::to_string_pretty(&doc)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Reads a COCO document, mapping categories onto `vocab` by name.
pub fn read_coco_annotations(path: &Path, vocab: &ClassVocabulary) -> Result<Vec<CocoImageRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_coco(&text, vocab)
}

fn parse_coco(text: &str, vocab: &ClassVocabulary) -> Result<Vec<CocoImageRecord>> {
    let doc: CocoDocument = serde_json::from_str(text)?;
    let categories: HashMap<u64, &str> = doc.categories.iter().map(|c| (c.id, c.name.as_str())).collect();
    let mut records: Vec<CocoImageRecord> = doc
        .images
        .iter()
        .map(|img| CocoImageRecord {
            image_id: img.id,
            width: img.width,
            height: img.height,
            file_name: img.file_name.clone(),
            instances: Vec::new(),
        })
        .collect();
    let slot: HashMap<u64, usize> = records.iter().enumerate().map(|(i, r)| (r.image_id, i)).collect();

    for ann in &doc.annotations {
        let fail = |reason: String| Error::CocoAnnotation {
            annotation_id: ann.id,
            reason,
        };
        let name = categories
            .get(&ann.category_id)
            .ok_or_else(|| fail(format!("category_id {} is not declared", ann.category_id)))?;
        let class_index = vocab
            .index_of(name)
            .ok_or_else(|| fail(format!("category `{name}` is not in the vocabulary")))?;
        let [_, _, w, h] = ann.bbox;
        if !(w > 0.0 && h > 0.0) {
            return Err(fail(format!("degenerate bbox {:?}", ann.bbox)));
        }
        let &i = slot
            .get(&ann.image_id)
            .ok_or_else(|| fail(format!("image_id {} is not declared", ann.image_id)))?;
        records[i].instances.push(Instance {
            class_index,
            bbox: BBox::from_xywh(ann.bbox),
        });
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{build_dataset, DatasetConfig};

    fn vocab() -> ClassVocabulary {
        DatasetConfig::default().vocabulary().unwrap()
    }

    #[test]
    fn round_trip() {
        let split = build_dataset(&DatasetConfig {
            base_train_images: 5,
            novel_pool_images: 40,
            test_images: 12,
            ..Default::default()
        })
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("test.json");
        write_coco_annotations(&split.test, &split.vocabulary, &path).unwrap();
        let back = read_coco_annotations(&path, &split.vocabulary).unwrap();
        let expected: Vec<CocoImageRecord> = split.test.iter().map(CocoImageRecord::from).collect();
        assert_eq!(back, expected);
    }

    #[test]
    fn bbox_convention() {
        let doc = r#"{"images":[{"id":1,"width":64,"height":64}],
            "annotations":[{"id":5,"image_id":1,"category_id":1,"bbox":[10,20,30,40]}],
            "categories":[{"id":1,"name":"circle"}]}"#;
        let recs = parse_coco(doc, &vocab()).unwrap();
        assert_eq!(recs[0].instances[0].bbox, BBox::new(10.0, 20.0, 40.0, 60.0));
        assert_eq!(recs[0].instances[0].class_index, 0);
    }

    #[test]
    fn missing_category_names_annotation() {
        let doc = r#"{"images":[{"id":1,"width":64,"height":64}],
            "annotations":[{"id":42,"image_id":1,"category_id":9,"bbox":[1,1,3,3]}],
            "categories":[{"id":1,"name":"circle"}]}"#;
        match parse_coco(doc, &vocab()).unwrap_err() {
            Error::CocoAnnotation { annotation_id, .. } => assert_eq!(annotation_id, 42),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn degenerate_box_rejected() {
        let doc = r#"{"images":[{"id":1,"width":64,"height":64}],
            "annotations":[{"id":7,"image_id":1,"category_id":1,"bbox":[1,1,0,3]}],
            "categories":[{"id":1,"name":"circle"}]}"#;
        match parse_coco(doc, &vocab()).unwrap_err() {
            Error::CocoAnnotation { annotation_id, reason } => {
                assert_eq!(annotation_id, 7);
                assert!(reason.contains("degenerate"));
            }
            other => panic!("unexpected {other}"),
        }
    }
}
