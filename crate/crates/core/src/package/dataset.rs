use std::path::Path;

use crate::detector::{Domain, OrientedBox, SceneSample};
use crate::error::{Error, Result};
use crate::package::{ArchiveEntry, EntryRole, TensorArchive};

const BOX_COLS: usize = 6;

/// Stores `sample{i}.image`, `sample{i}.boxes` (`n × [cx, cy, w, h, θ, label]`)
/// and a `domains` vector (0 = D1, 1 = D2) in the tensor-archive format.
pub fn save_dataset(path: &Path, samples: &[SceneSample]) -> Result<()> {
    let mut archive = TensorArchive::new();
    for (i, s) in samples.iter().enumerate() {
        archive.push(ArchiveEntry::from_matrix(format!("sample{i}.image"), EntryRole::Base, &s.image)?)?;
        let data = s
            .boxes
            .iter()
            .zip(&s.labels)
            .flat_map(|(b, &l)| [b.cx, b.cy, b.w, b.h, b.theta, l as f64])
            .map(|v| v as f32)
            .collect();
        archive.push(ArchiveEntry::new(
            format!("sample{i}.boxes"),
            EntryRole::Base,
            vec![s.boxes.len(), BOX_COLS],
            data,
        )?)?;
    }
    let domains = samples
        .iter()
        .map(|s| if s.domain == Domain::D1 { 0.0 } else { 1.0 })
        .collect();
    archive.push(ArchiveEntry::new("domains", EntryRole::Base, vec![samples.len()], domains)?)?;
    archive.write(path)
}

pub fn load_dataset(path: &Path) -> Result<Vec<SceneSample>> {
    let archive = TensorArchive::read(path)?;
    let missing = |name: &str| Error::Format(format!("{}: dataset lacks '{name}'", path.display()));
    let domains = archive.get("domains").ok_or_else(|| missing("domains"))?;
    let mut samples = Vec::with_capacity(domains.data.len());
    for (i, &d) in domains.data.iter().enumerate() {
        let image_name = format!("sample{i}.image");
        let boxes_name = format!("sample{i}.boxes");
        let image = archive.get(&image_name).ok_or_else(|| missing(&image_name))?.to_matrix()?;
        let table = archive.get(&boxes_name).ok_or_else(|| missing(&boxes_name))?;
        if table.dims.len() != 2 || table.dims[1] != BOX_COLS {
            return Err(Error::Format(format!("'{boxes_name}' must be n×{BOX_COLS}")));
        }
        let mut boxes = Vec::new();
        let mut labels = Vec::new();
        for row in table.data.chunks_exact(BOX_COLS) {
            let r: Vec<f64> = row.iter().map(|&v| f64::from(v)).collect();
            boxes.push(OrientedBox::new(r[0], r[1], r[2], r[3], r[4])?);
            labels.push(r[5] as usize);
        }
        samples.push(SceneSample {
            image,
            boxes,
            labels,
            domain: if d == 0.0 { Domain::D1 } else { Domain::D2 },
        });
    }
    Ok(samples)
}
