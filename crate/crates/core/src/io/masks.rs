//! Per-view mask files.
//!
//! `<view_id>.png` is a 16-bit grayscale label raster (0 = background, k =
//! local mask label). The optional `<view_id>.masks.json` maps local labels to
//! scene-wide mask ids and may also carry run-length encoded masks, which is
//! how overlapping masks are stored without loss.

use std::io::Cursor;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::binary::{create, read_file};
use crate::scene::{CameraView, Mask2D, MaskSet};

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct MaskListing {
    pub masks: Vec<MaskEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MaskEntry {
    pub mask_id: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<u16>,
    /// `[start, length]` runs over row-major pixel indices.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rle: Option<Vec<[u32; 2]>>,
}

pub fn read_label_png(path: &Path) -> Result<(u32, u32, Vec<u16>)> {
    let bytes = read_file(path)?;
    let decode_err = |e: png::DecodingError| Error::parse(path, "png stream", e.to_string());
    let decoder = png::Decoder::new(Cursor::new(bytes));
    let mut reader = decoder.read_info().map_err(decode_err)?;
    let info = reader.info();
    let (width, height) = (info.width, info.height);
    if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::Sixteen {
        return Err(Error::parse(
            path,
            "png header",
            format!("expected 16-bit grayscale, got {:?} {:?}", info.color_type, info.bit_depth),
        ));
    }
    let mut buf = vec![0u8; reader.output_buffer_size().unwrap_or(0)];
    reader.next_frame(&mut buf).map_err(decode_err)?;
    let labels = buf
        .chunks_exact(2)
        .take(width as usize * height as usize)
        .map(|c| u16::from_be_bytes([c[0], c[1]]))
        .collect();
    Ok((width, height, labels))
}

pub fn write_label_png(path: &Path, width: u32, height: u32, labels: &[u16]) -> Result<()> {
    let w = create(path)?;
    let encode_err = |e: png::EncodingError| Error::io(path, std::io::Error::other(e));
    let mut enc = png::Encoder::new(w, width, height);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Sixteen);
    let mut writer = enc.write_header().map_err(encode_err)?;
    let bytes: Vec<u8> = labels.iter().flat_map(|l| l.to_be_bytes()).collect();
    writer.write_image_data(&bytes).map_err(encode_err)?;
    writer.finish().map_err(encode_err)
}

fn rle_encode(mask: &Mask2D) -> Vec<[u32; 2]> {
    let mut runs: Vec<[u32; 2]> = Vec::new();
    for p in mask.pixel_indices() {
        let p = p as u32;
        match runs.last_mut() {
            Some(r) if r[0] + r[1] == p => r[1] += 1,
            _ => runs.push([p, 1]),
        }
    }
    runs
}

/// Loads all masks for `views` from `dir`. Views without a PNG contribute no
/// masks. Without a listing file, mask ids are assigned sequentially in view
/// order, then label order.
pub fn read_masks(dir: &Path, views: &[CameraView]) -> Result<MaskSet> {
    let mut masks = Vec::new();
    let mut next_id = 0u32;
    for view in views {
        let png_path = dir.join(format!("{}.png", view.view_id()));
        let json_path = dir.join(format!("{}.masks.json", view.view_id()));
        let raster = if png_path.exists() {
            let (w, h, labels) = read_label_png(&png_path)?;
            if (w, h) != (view.width(), view.height()) {
                return Err(Error::Validation(format!(
                    "{}: raster is {w}x{h} but view {} is {}x{}",
                    png_path.display(),
                    view.view_id(),
                    view.width(),
                    view.height()
                )));
            }
            Some(labels)
        } else {
            None
        };
        let listing: Option<MaskListing> = if json_path.exists() {
            let data = read_file(&json_path)?;
            Some(serde_json::from_slice(&data).map_err(|e| {
                Error::parse(&json_path, format!("line {} column {}", e.line(), e.column()), e.to_string())
            })?)
        } else {
            None
        };

        let mut by_label: Vec<Vec<usize>> = Vec::new();
        if let Some(labels) = &raster {
            for (p, &l) in labels.iter().enumerate() {
                if l == 0 {
                    continue;
                }
                let l = l as usize;
                if by_label.len() <= l {
                    by_label.resize(l + 1, Vec::new());
                }
                by_label[l].push(p);
            }
        }
        let (w, h) = (view.width(), view.height());
        match listing {
            Some(listing) => {
                let mut used = vec![false; by_label.len()];
                for entry in listing.masks {
                    let mask = match (entry.label, &entry.rle) {
                        (_, Some(runs)) => Mask2D::from_pixel_indices(
                            view.view_id(),
                            entry.mask_id,
                            w,
                            h,
                            runs.iter().flat_map(|r| r[0] as usize..(r[0] + r[1]) as usize),
                        )?,
                        (Some(label), None) => {
                            let l = label as usize;
                            let pixels = by_label.get(l).filter(|p| !p.is_empty()).ok_or_else(|| {
                                Error::Validation(format!(
                                    "{}: label {label} listed but absent from the raster",
                                    json_path.display()
                                ))
                            })?;
                            used[l] = true;
                            Mask2D::from_pixel_indices(view.view_id(), entry.mask_id, w, h, pixels.iter().copied())?
                        }
                        (None, None) => {
                            return Err(Error::Validation(format!(
                                "{}: mask {} has neither a label nor runs",
                                json_path.display(),
                                entry.mask_id
                            )))
                        }
                    };
                    masks.push(mask);
                }
                if let Some(l) = by_label.iter().enumerate().position(|(l, p)| !p.is_empty() && !used[l]) {
                    return Err(Error::Validation(format!(
                        "{}: raster label {l} is not listed",
                        json_path.display()
                    )));
                }
            }
            None => {
                for pixels in by_label.iter().filter(|p| !p.is_empty()) {
                    masks.push(Mask2D::from_pixel_indices(view.view_id(), next_id, w, h, pixels.iter().copied())?);
                    next_id += 1;
                }
            }
        }
        next_id = next_id.max(masks.iter().map(|m| m.mask_id() + 1).max().unwrap_or(0));
    }
    MaskSet::new(masks)
}

/// Writes one PNG and one listing per view that has masks. Overlapping masks
/// are written as runs so that reading back is exact.
pub fn write_masks(dir: &Path, views: &[CameraView], masks: &MaskSet) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for view in views {
        let view_masks: Vec<&Mask2D> = masks.for_view(view.view_id()).collect();
        if view_masks.is_empty() {
            continue;
        }
        let mut raster = vec![0u16; view.pixel_count()];
        let mut listing = MaskListing::default();
        for (k, mask) in view_masks.iter().enumerate() {
            let label = u16::try_from(k + 1).ok();
            let overlaps = mask.pixel_indices().any(|p| raster[p] != 0);
            match label {
                Some(label) if !overlaps => {
                    for p in mask.pixel_indices() {
                        raster[p] = label;
                    }
                    listing.masks.push(MaskEntry {
                        mask_id: mask.mask_id(),
                        label: Some(label),
                        rle: None,
                    });
                }
                _ => listing.masks.push(MaskEntry {
                    mask_id: mask.mask_id(),
                    label: None,
                    rle: Some(rle_encode(mask)),
                }),
            }
        }
        write_label_png(&dir.join(format!("{}.png", view.view_id())), view.width(), view.height(), &raster)?;
        super::write_json(&dir.join(format!("{}.masks.json", view.view_id())), &listing)?;
    }
    Ok(())
}
