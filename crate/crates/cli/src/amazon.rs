//! Convert the public Amazon review dumps (one JSON object per line, optionally
//! gzipped) plus product metadata into review records.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use flate2::read::MultiGzDecoder;
use serde_json::Value;

use sbg_core::corpus::ReviewRecord;

use crate::fail::{Failure, Outcome};

fn open_lines(path: &Path) -> Outcome<Box<dyn BufRead>> {
    let file = File::open(path).map_err(|e| Failure::io(path, e))?;
    let gz = path.extension().is_some_and(|e| e == "gz");
    Ok(if gz {
        Box::new(BufReader::new(MultiGzDecoder::new(file)))
    } else {
        Box::new(BufReader::new(file))
    })
}

fn strings(v: &Value) -> Vec<String> {
    v.as_array()
        .map(|a| {
            a.iter()
                .filter_map(Value::as_str)
                .map(|s| s.trim().to_string())
                .filter(|s| !s.is_empty())
                .collect()
        })
        .unwrap_or_default()
}

/// Category path of one metadata object. Newer dumps carry `category` as a
/// flat list, older ones `categories` as a list of paths (the first is used);
/// `main_cat` is the last resort.
pub fn category_path(meta: &Value) -> Vec<String> {
    let flat = strings(&meta["category"]);
    if !flat.is_empty() {
        return flat;
    }
    if let Some(first) = meta["categories"].as_array().and_then(|a| a.first()) {
        let nested = strings(first);
        if !nested.is_empty() {
            return nested;
        }
    }
    meta["main_cat"]
        .as_str()
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| vec![s.to_string()])
        .unwrap_or_default()
}

#[derive(Debug, Default, Clone, PartialEq, Eq)]
pub struct ConvertStats {
    pub written: usize,
    pub malformed: usize,
    pub without_category: usize,
}

pub fn load_categories(meta: &Path) -> Outcome<(HashMap<String, Vec<String>>, usize)> {
    let mut map = HashMap::new();
    let mut malformed = 0;
    for line in open_lines(meta)?.lines() {
        let line = line.map_err(|e| Failure::io(meta, e))?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<Value>(&line) {
            Ok(v) => {
                if let Some(asin) = v["asin"].as_str() {
                    map.insert(asin.to_string(), category_path(&v));
                } else {
                    malformed += 1;
                }
            }
            Err(_) => malformed += 1,
        }
    }
    Ok((map, malformed))
}

fn review_record(v: &Value, categories: &HashMap<String, Vec<String>>) -> Option<Result<ReviewRecord, ()>> {
    let user = v["reviewerID"].as_str()?;
    let asin = v["asin"].as_str()?;
    let timestamp = v["unixReviewTime"].as_u64()?;
    let path = categories.get(asin).cloned().unwrap_or_default();
    if path.is_empty() {
        return Some(Err(()));
    }
    let text: Vec<&str> = [&v["summary"], &v["reviewText"]]
        .into_iter()
        .filter_map(Value::as_str)
        .collect();
    Some(Ok(ReviewRecord {
        user_id: user.to_string(),
        product_id: asin.to_string(),
        timestamp,
        review_text: text.join(" "),
        category_path: path,
    }))
}

/// Join reviews with product categories. Reviews of products without any
/// category cannot form a query and are dropped (and counted).
pub fn convert(reviews: &Path, meta: &Path) -> Outcome<(Vec<ReviewRecord>, ConvertStats)> {
    let (categories, meta_bad) = load_categories(meta)?;
    let mut stats = ConvertStats {
        malformed: meta_bad,
        ..ConvertStats::default()
    };
    let mut out = Vec::new();
    for line in open_lines(reviews)?.lines() {
        let line = line.map_err(|e| Failure::io(reviews, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed = serde_json::from_str::<Value>(&line).ok();
        match parsed.as_ref().and_then(|v| review_record(v, &categories)) {
            Some(Ok(r)) => out.push(r),
            Some(Err(())) => stats.without_category += 1,
            None => stats.malformed += 1,
        }
    }
    stats.written = out.len();
    Ok((out, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn category_sources_in_priority_order() {
        assert_eq!(category_path(&json!({"category": ["A", " B "]})), vec!["A", "B"]);
        assert_eq!(category_path(&json!({"category": [], "categories": [["X", "Y"], ["Z"]]})), vec!["X", "Y"]);
        assert_eq!(category_path(&json!({"main_cat": "Books"})), vec!["Books"]);
        assert!(category_path(&json!({})).is_empty());
    }

    #[test]
    fn reviews_join_metadata() {
        let dir = tempfile::tempdir().unwrap();
        let meta = dir.path().join("meta.json");
        let reviews = dir.path().join("reviews.json");
        std::fs::write(
            &meta,
            "{\"asin\": \"p1\", \"category\": [\"Mags\", \"News\"]}\n{\"asin\": \"p2\"}\nnot json\n",
        )
        .unwrap();
        std::fs::write(
            &reviews,
            concat!(
                "{\"reviewerID\": \"u1\", \"asin\": \"p1\", \"unixReviewTime\": 100, \"summary\": \"Good\", \"reviewText\": \"fine read\"}\n",
                "{\"reviewerID\": \"u1\", \"asin\": \"p2\", \"unixReviewTime\": 200}\n",
                "{\"reviewerID\": \"u2\", \"asin\": \"p1\"}\n",
            ),
        )
        .unwrap();
        let (records, stats) = convert(&reviews, &meta).unwrap();
        assert_eq!(records.len(), 1);
        assert_eq!(records[0].review_text, "Good fine read");
        assert_eq!(records[0].category_path, vec!["Mags", "News"]);
        assert_eq!(
            stats,
            ConvertStats {
                written: 1,
                malformed: 2,
                without_category: 1
            }
        );
    }
}
