//! Instance outputs: an `IN3D` per-point label array (−1 = unassigned) plus a
//! JSON manifest. Checkpoints add an exact `IS3D` member list so overlapping
//! proposals survive a round trip.

use std::cmp::Ordering;
use std::io::Write;
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::binary::{self, create, read_file, ByteReader, INSTANCE_MAGIC};
use crate::scene::{PointSetInstance, ProposalSet, Provenance};

pub const MEMBERS_MAGIC: &[u8; 4] = b"IS3D";
pub const UNASSIGNED: i32 = -1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceManifest {
    pub point_count: usize,
    pub view_count: usize,
    pub instances: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: i32,
    pub confidence: f64,
    /// Points carrying this id in the label array.
    pub size: usize,
    /// Points before overlap resolution; the difference went to instances
    /// with higher precedence.
    pub original_size: usize,
    pub provenance: Provenance,
}

/// Precedence order used for ids and overlap resolution: confidence
/// descending, then size descending, then point lists lexicographically.
pub fn precedence_order(instances: &[PointSetInstance]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..instances.len()).collect();
    order.sort_by(|&a, &b| {
        let (x, y) = (&instances[a], &instances[b]);
        y.confidence
            .partial_cmp(&x.confidence)
            .unwrap_or(Ordering::Equal)
            .then(y.len().cmp(&x.len()))
            .then_with(|| x.points().cmp(y.points()))
            .then(a.cmp(&b))
    });
    order
}

/// Resolves proposals into a per-point label array. Ids follow precedence
/// order; a point claimed by several proposals keeps the first id.
pub fn resolve_labels(proposals: &ProposalSet, point_count: usize) -> Result<(Vec<i32>, InstanceManifest)> {
    for inst in &proposals.instances {
        inst.validate_against(point_count)?;
    }
    let mut labels = vec![UNASSIGNED; point_count];
    let mut entries = Vec::with_capacity(proposals.len());
    for (rank, &idx) in precedence_order(&proposals.instances).iter().enumerate() {
        let inst = &proposals.instances[idx];
        let id = i32::try_from(rank).map_err(|_| Error::Validation("too many instances".into()))?;
        let mut size = 0;
        for &p in inst.points() {
            let slot = &mut labels[p as usize];
            if *slot == UNASSIGNED {
                *slot = id;
                size += 1;
            }
        }
        entries.push(ManifestEntry {
            id,
            confidence: inst.confidence,
            size,
            original_size: inst.len(),
            provenance: inst.provenance.clone(),
        });
    }
    Ok((
        labels,
        InstanceManifest {
            point_count,
            view_count: proposals.view_count,
            instances: entries,
        },
    ))
}

pub fn manifest_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

pub fn members_path(path: &Path) -> PathBuf {
    path.with_extension("members")
}

/// Writes `path` (label array) and its manifest next to it.
pub fn write_instances(proposals: &ProposalSet, point_count: usize, path: &Path) -> Result<InstanceManifest> {
    let (labels, manifest) = resolve_labels(proposals, point_count)?;
    binary::write_label_file(path, INSTANCE_MAGIC, &labels)?;
    super::write_json(&manifest_path(path), &manifest)?;
    Ok(manifest)
}

pub fn read_instance_labels(path: &Path) -> Result<Vec<i32>> {
    let labels = binary::read_label_file(path, INSTANCE_MAGIC)?;
    if let Some(bad) = labels.iter().position(|&l| l < UNASSIGNED) {
        return Err(Error::Validation(format!(
            "{}: point {bad} has label {}, below the −1 sentinel",
            path.display(),
            labels[bad]
        )));
    }
    Ok(labels)
}

pub fn read_manifest(path: &Path) -> Result<InstanceManifest> {
    let mpath = manifest_path(path);
    let data = read_file(&mpath)?;
    serde_json::from_slice(&data)
        .map_err(|e| Error::parse(&mpath, format!("line {} column {}", e.line(), e.column()), e.to_string()))
}

/// Groups a label array into per-id sorted point lists (index = id).
pub fn group_labels(labels: &[i32]) -> Vec<Vec<u32>> {
    let max = labels.iter().copied().max().unwrap_or(UNASSIGNED);
    let mut groups = vec![Vec::new(); (max + 1).max(0) as usize];
    for (i, &l) in labels.iter().enumerate() {
        if l >= 0 {
            groups[l as usize].push(i as u32);
        }
    }
    groups
}

/// Reads label array + manifest back into proposals. Instances that lost
/// every point to overlap resolution are dropped.
pub fn read_instances(path: &Path) -> Result<ProposalSet> {
    let labels = read_instance_labels(path)?;
    let manifest = read_manifest(path)?;
    if manifest.point_count != labels.len() {
        return Err(Error::Validation(format!(
            "{}: manifest covers {} points but the label array has {}",
            path.display(),
            manifest.point_count,
            labels.len()
        )));
    }
    let mut groups = group_labels(&labels);
    let mut instances = Vec::new();
    for entry in &manifest.instances {
        let points = groups
            .get_mut(entry.id.max(0) as usize)
            .map(std::mem::take)
            .unwrap_or_default();
        if points.len() != entry.size {
            return Err(Error::Validation(format!(
                "{}: instance {} has {} labeled points but the manifest says {}",
                path.display(),
                entry.id,
                points.len(),
                entry.size
            )));
        }
        if points.is_empty() {
            continue;
        }
        instances.push(PointSetInstance::new(points, entry.provenance.clone(), entry.confidence)?);
    }
    if groups.iter().any(|g| !g.is_empty()) {
        return Err(Error::Validation(format!(
            "{}: label array uses ids missing from the manifest",
            path.display()
        )));
    }
    Ok(ProposalSet::new(instances, manifest.view_count))
}

/// Writes a lossless checkpoint: label array, manifest and exact member lists
/// (in manifest order, so overlapping points are kept).
pub fn write_checkpoint(proposals: &ProposalSet, point_count: usize, path: &Path) -> Result<()> {
    write_instances(proposals, point_count, path)?;
    let mpath = members_path(path);
    let mut w = create(&mpath)?;
    let r = (|| {
        w.write_all(MEMBERS_MAGIC)?;
        w.write_u32::<LittleEndian>(binary::FORMAT_VERSION)?;
        w.write_u64::<LittleEndian>(proposals.len() as u64)?;
        for idx in precedence_order(&proposals.instances) {
            let inst = &proposals.instances[idx];
            w.write_u64::<LittleEndian>(inst.len() as u64)?;
            for &p in inst.points() {
                w.write_u32::<LittleEndian>(p)?;
            }
        }
        w.flush()
    })();
    r.map_err(|e| Error::io(&mpath, e))
}

/// Reads a checkpoint back. Instances come out in precedence order.
pub fn read_checkpoint(path: &Path) -> Result<ProposalSet> {
    let manifest = read_manifest(path)?;
    let mpath = members_path(path);
    let data = read_file(&mpath)?;
    let mut r = ByteReader::new(&mpath, &data);
    r.magic(MEMBERS_MAGIC)?;
    let version = r.u32()?;
    if version != binary::FORMAT_VERSION {
        return Err(r.error(format!("unsupported version {version}")));
    }
    let count = r.u64()? as usize;
    if count != manifest.instances.len() {
        return Err(r.error(format!(
            "{count} member lists but the manifest has {} instances",
            manifest.instances.len()
        )));
    }
    let mut instances = Vec::with_capacity(count);
    for entry in &manifest.instances {
        let len = r.u64()? as usize;
        if len != entry.original_size {
            return Err(r.error(format!(
                "instance {} has {len} members but the manifest says {}",
                entry.id, entry.original_size
            )));
        }
        let at = r.offset();
        let points: Vec<u32> = r.i32_array(len)?.into_iter().map(|v| v as u32).collect();
        if points.iter().any(|&p| p as usize >= manifest.point_count) {
            return Err(Error::parse(&mpath, format!("byte {at}"), "point index out of range"));
        }
        instances.push(
            PointSetInstance::new(points, entry.provenance.clone(), entry.confidence)
                .map_err(|e| Error::parse(&mpath, format!("byte {at}"), e.to_string()))?,
        );
    }
    r.finish()?;
    Ok(ProposalSet::new(instances, manifest.view_count))
}
