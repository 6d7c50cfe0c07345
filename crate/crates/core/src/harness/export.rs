use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::Model;
use crate::params::Role;
use crate::rpe::{write_csv, write_pgm, RelPosDictionary, RelPosKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportedMatrix {
    pub param: String,
    pub kind: RelPosKind,
    pub group: usize,
    pub tokens: usize,
    pub csv: String,
    pub pgm: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportManifest {
    pub matrices: Vec<ExportedMatrix>,
}

fn stage_of(name: &str) -> Option<usize> {
    name.strip_prefix("stage")?.split('.').next()?.parse::<usize>().ok()?.checked_sub(1)
}

/// Expands every dictionary of `model` and writes one CSV and one PGM
/// heatmap per group, plus `manifest.json`.
pub fn export_relations(model: &Model, out: &Path) -> Result<ExportManifest> {
    fs::create_dir_all(out)?;
    let mut matrices = Vec::new();
    for (spec, table) in model.params.iter().filter(|(s, _)| s.role == Role::Dictionary) {
        let stage = stage_of(&spec.name).ok_or_else(|| Error::Invalid(format!("unexpected dictionary `{}`", spec.name)))?;
        let kind = match table.rank() {
            2 => RelPosKind::Temporal,
            3 => RelPosKind::Spatial,
            _ => RelPosKind::SpatioTemporal,
        };
        let dict = RelPosDictionary::from_table(kind, model.config.windows[stage], table.clone())?;
        let expanded = dict.expand();
        let stem = spec.name.trim_end_matches(".dict").replace('.', "_");
        for g in 0..dict.groups {
            let m = expanded.group(g);
            let csv = format!("{stem}_g{g}.csv");
            let pgm = format!("{stem}_g{g}.pgm");
            write_csv(&m, &out.join(&csv))?;
            write_pgm(&m, &out.join(&pgm))?;
            matrices.push(ExportedMatrix {
                param: spec.name.clone(),
                kind,
                group: g,
                tokens: expanded.tokens(),
                csv,
                pgm,
            });
        }
    }
    let manifest = ExportManifest { matrices };
    fs::write(out.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::BlockVariant;
    use crate::harness::toy_model_config;
    use crate::rpe::{is_translation_invariant, read_csv};

    #[test]
    fn exports_every_group() {
        let dir = tempfile::tempdir().unwrap();
        let config = toy_model_config(BlockVariant::CascadeTS);
        let model = Model::new(config.clone(), 3).unwrap();
        let manifest = export_relations(&model, dir.path()).unwrap();
        let want: usize = (0..4).map(|s| config.depths[s] * 2 * config.groups[s]).sum();
        assert_eq!(manifest.matrices.len(), want);
        let first = &manifest.matrices[0];
        let m = read_csv(&dir.path().join(&first.csv)).unwrap();
        let dict = RelPosDictionary::from_table(
            first.kind,
            config.windows[0],
            model.params.get(&first.param).unwrap().clone(),
        )
        .unwrap();
        assert!(m.max_abs_diff(&dict.expand().group(first.group)) <= 1e-12);
        for e in &manifest.matrices {
            let stage = stage_of(&e.param).unwrap();
            let m = read_csv(&dir.path().join(&e.csv)).unwrap();
            assert!(is_translation_invariant(e.kind, config.windows[stage], &m));
        }
        assert!(dir.path().join("manifest.json").exists());
    }

    #[test]
    fn unwritable_directory_fails() {
        let dir = tempfile::tempdir().unwrap();
        let blocker = dir.path().join("file");
        fs::write(&blocker, b"x").unwrap();
        let model = Model::new(toy_model_config(BlockVariant::SpatialOnly), 0).unwrap();
        assert!(export_relations(&model, &blocker.join("sub")).is_err());
    }
}
