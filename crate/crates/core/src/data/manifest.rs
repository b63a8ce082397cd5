//! Case manifests: CSV rows `case_id,view,path,label`, grouped by case.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::data::image::{load_image, to_model_input_channels};
use crate::data::Case;
use crate::error::{Error, Result};
use crate::vision::View;

/// Parses `0`, `1`, `negative`, `positive` (any case).
pub fn parse_label(s: &str) -> Option<usize> {
    match s.trim().to_ascii_lowercase().as_str() {
        "0" | "negative" => Some(0),
        "1" | "positive" => Some(1),
        _ => None,
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CaseRecord {
    pub case_id: String,
    /// Image path per view, in fusion order of the requested views.
    pub views: Vec<(View, PathBuf)>,
    pub label: usize,
}

#[derive(Deserialize)]
struct Row {
    case_id: String,
    view: String,
    path: String,
    label: String,
}

/// Reads a manifest and checks that every case has each of `views`. Paths
/// are resolved against the manifest's directory. Cases keep the order of
/// their first row.
pub fn load_manifest(path: &Path, views: &[View]) -> Result<Vec<CaseRecord>> {
    let base = path.parent().unwrap_or(Path::new("")).to_path_buf();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::Reader::from_reader(file);
    let headers = reader.headers()?.clone();
    for h in ["case_id", "view", "path", "label"] {
        if !headers.iter().any(|x| x == h) {
            return Err(Error::Manifest(format!("header lacks column `{h}`")));
        }
    }
    let mut order: Vec<String> = Vec::new();
    let mut cases: BTreeMap<String, (BTreeMap<View, PathBuf>, usize)> = BTreeMap::new();
    for (line, row) in reader.deserialize::<Row>().enumerate() {
        let row = row?;
        let line = line + 2;
        let view = View::parse(&row.view)
            .ok_or_else(|| Error::Manifest(format!("line {line}: unknown view `{}`", row.view)))?;
        let label = parse_label(&row.label)
            .ok_or_else(|| Error::Manifest(format!("line {line}: unknown label `{}`", row.label)))?;
        let img = base.join(&row.path);
        let entry = cases.entry(row.case_id.clone()).or_insert_with(|| {
            order.push(row.case_id.clone());
            (BTreeMap::new(), label)
        });
        if entry.1 != label {
            return Err(Error::Manifest(format!(
                "line {line}: case `{}` has inconsistent labels",
                row.case_id
            )));
        }
        if entry.0.insert(view, img).is_some() {
            return Err(Error::Manifest(format!(
                "line {line}: case `{}` lists view {view} twice",
                row.case_id
            )));
        }
    }
    let mut out = Vec::with_capacity(order.len());
    for id in order {
        let (map, label) = &cases[&id];
        let mut vs = Vec::with_capacity(views.len());
        for &v in views {
            let p = map
                .get(&v)
                .ok_or_else(|| Error::Manifest(format!("case `{id}` is missing view {v}")))?;
            if !p.is_file() {
                return Err(Error::Image {
                    path: p.clone(),
                    msg: format!("image for case `{id}` view {v} is not readable"),
                });
            }
            vs.push((v, p.clone()));
        }
        out.push(CaseRecord {
            case_id: id,
            views: vs,
            label: *label,
        });
    }
    Ok(out)
}

/// Loads and preprocesses the images of each record.
pub fn load_cases(records: &[CaseRecord], image_size: usize, channels: usize) -> Result<Vec<Case>> {
    records
        .iter()
        .map(|r| {
            let images = r
                .views
                .iter()
                .map(|(_, p)| to_model_input_channels(&load_image(p)?, image_size, channels))
                .collect::<Result<_>>()?;
            Ok(Case {
                id: r.case_id.clone(),
                label: r.label,
                images,
            })
        })
        .collect()
}
