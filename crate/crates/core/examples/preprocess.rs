//! Resamples an anisotropic CT-like volume to 1 mm, maps HU to [-1, 1) and
//! cuts the 32³ crop around a lesion, then round-trips it through PRVX.

use fcdx::volume::{crop_centered, normalize_hu, read_volume, resample_isotropic, write_volume, Volume, CROP};

fn main() -> fcdx::Result<()> {
    // 40 x 48 x 48 voxels at 2.5 x 0.7 x 0.7 mm with a 6 mm sphere of soft tissue.
    let (extents, spacing) = ([40, 48, 48], [2.5f32, 0.7, 0.7]);
    let center_mm = [50.0, 16.8, 16.8];
    let mut data = Vec::with_capacity(extents.iter().product());
    for z in 0..extents[0] {
        for y in 0..extents[1] {
            for x in 0..extents[2] {
                let p = [z, y, x].map(|v| v as f64 + 0.5);
                let d2: f64 = (0..3).map(|a| (p[a] * spacing[a] as f64 - center_mm[a]).powi(2)).sum();
                data.push(if d2 < 36.0 { 40.0 } else { -850.0 });
            }
        }
    }
    let raw = Volume::new(extents, spacing, data)?;
    let iso = resample_isotropic(&raw)?;
    println!("resampled {:?} @ {:?} mm -> {:?} @ 1 mm", raw.extents, raw.spacing, iso.extents);

    let norm = normalize_hu(&iso);
    let center = center_mm.map(|c| c as usize);
    let crop = crop_centered(&norm, center, CROP)?;
    let inside = crop.data.iter().filter(|&&v| v > -0.2).count();
    let padded = crop.data.iter().filter(|&&v| v == fcdx::volume::PAD).count();
    println!("crop {:?}: {inside} lesion voxels, {padded} padded voxels", crop.extents);

    let path = std::env::temp_dir().join("fcdx-crop.prvx");
    write_volume(&path, &crop)?;
    assert_eq!(read_volume(&path)?, crop);
    println!("wrote and re-read {}", path.display());
    Ok(())
}
