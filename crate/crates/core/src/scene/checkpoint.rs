//! Single-file checkpoint: magic "SDGS", format version, voxel size, k,
//! anchor count, fixed-width little-endian anchor records (x, f_v, log l,
//! q, O), then the serialized generation nets and deformation field.
//! A trailing training section (optimizer state, step, accumulators) may
//! follow; readers that only need the scene ignore it.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::field::DeformationField;
use crate::gen::GenNets;
use crate::math::Quaternion;
use crate::nn::{read_f32, read_u32};
use crate::scalar::{real, Real};
use crate::scene::{CanonicalModel, DensifyAccum, FEATURE_DIM};

pub const MAGIC: &[u8; 4] = b"SDGS";
pub const VERSION: u32 = 1;
/// Marks the optional trailing training-state section.
pub const TRAIN_MAGIC: &[u8; 4] = b"TRN1";

fn write_f32<T: Real>(w: &mut impl Write, v: T) -> std::io::Result<()> {
    w.write_all(&(v.to_f64_lossy() as f32).to_le_bytes())
}

/// Serialize the scene (model + nets + field) into a writer.
pub fn write_system<T: Real>(
    w: &mut impl Write,
    model: &CanonicalModel<T>,
    nets: &GenNets<T>,
    field: &DeformationField<T>,
) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    write_f32(w, model.voxel_size)?;
    w.write_all(&(model.offsets_per_anchor as u32).to_le_bytes())?;
    w.write_all(&(model.len() as u32).to_le_bytes())?;
    for i in 0..model.len() {
        for a in 0..3 {
            write_f32(w, model.positions[i][a])?;
        }
        for v in &model.features[i] {
            write_f32(w, *v)?;
        }
        for v in &model.log_scales[i] {
            write_f32(w, *v)?;
        }
        let q = &model.rotations[i];
        for v in [q.w, q.x, q.y, q.z] {
            write_f32(w, v)?;
        }
        for o in &model.offsets[i] {
            for a in 0..3 {
                write_f32(w, o[a])?;
            }
        }
    }
    nets.save(w)?;
    field.save(w)?;
    Ok(())
}

/// Deserialize the scene; leaves the reader positioned at any trailing
/// training section.
pub fn read_system<T: Real>(
    r: &mut impl Read,
) -> Result<(CanonicalModel<T>, GenNets<T>, DeformationField<T>)> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::CheckpointFormat(format!(
            "bad magic {magic:?}, expected {MAGIC:?}"
        )));
    }
    let version = read_u32(r)?;
    if version != VERSION {
        return Err(Error::CheckpointVersion {
            found: version,
            supported: VERSION,
        });
    }
    let voxel_size: T = real(read_f32(r)? as f64);
    let k = read_u32(r)? as usize;
    let count = read_u32(r)? as usize;
    if k == 0 || k > 1024 || count > 50_000_000 {
        return Err(Error::CheckpointFormat(format!(
            "implausible k={k} count={count}"
        )));
    }
    let mut model = CanonicalModel {
        voxel_size,
        offsets_per_anchor: k,
        positions: Vec::with_capacity(count),
        features: Vec::with_capacity(count),
        log_scales: Vec::with_capacity(count),
        rotations: Vec::with_capacity(count),
        offsets: Vec::with_capacity(count),
        stats: Vec::with_capacity(count),
    };
    for _ in 0..count {
        let mut pos = Vector3::zeros();
        for a in 0..3 {
            pos[a] = real(read_f32(r)? as f64);
        }
        let mut feature = [T::zero(); FEATURE_DIM];
        for v in &mut feature {
            *v = real(read_f32(r)? as f64);
        }
        let mut log_scale = [T::zero(); 6];
        for v in &mut log_scale {
            *v = real(read_f32(r)? as f64);
        }
        let mut q = [T::zero(); 4];
        for v in &mut q {
            *v = real(read_f32(r)? as f64);
        }
        let mut offsets = Vec::with_capacity(k);
        for _ in 0..k {
            let mut o = Vector3::zeros();
            for a in 0..3 {
                o[a] = real(read_f32(r)? as f64);
            }
            offsets.push(o);
        }
        model.push_anchor(
            pos,
            feature,
            log_scale,
            Quaternion {
                w: q[0],
                x: q[1],
                y: q[2],
                z: q[3],
            },
            offsets,
            0,
        );
    }
    let nets = GenNets::load(r)?;
    let field = DeformationField::load(r)?;
    Ok((model, nets, field))
}

/// Per-anchor densification accumulators, stored in the training section so
/// the spec'd anchor record layout stays fixed while round-trips remain
/// lossless for every anchor field.
pub fn write_stats<T: Real>(w: &mut impl Write, stats: &[DensifyAccum<T>]) -> Result<()> {
    w.write_all(&(stats.len() as u32).to_le_bytes())?;
    for s in stats {
        write_f32(w, s.grad_num)?;
        write_f32(w, s.grad_den)?;
        w.write_all(&(s.child_grad.len() as u32).to_le_bytes())?;
        for v in &s.child_grad {
            write_f32(w, *v)?;
        }
        write_f32(w, s.opacity_acc)?;
        w.write_all(&s.obs.to_le_bytes())?;
        w.write_all(&s.spawn_step.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_stats<T: Real>(r: &mut impl Read) -> Result<Vec<DensifyAccum<T>>> {
    let n = read_u32(r)? as usize;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let grad_num = real(read_f32(r)? as f64);
        let grad_den = real(read_f32(r)? as f64);
        let k = read_u32(r)? as usize;
        let mut child_grad = Vec::with_capacity(k);
        for _ in 0..k {
            child_grad.push(real(read_f32(r)? as f64));
        }
        let opacity_acc = real(read_f32(r)? as f64);
        let mut buf4 = [0u8; 4];
        r.read_exact(&mut buf4)?;
        let obs = u32::from_le_bytes(buf4);
        let mut buf8 = [0u8; 8];
        r.read_exact(&mut buf8)?;
        let spawn_step = u64::from_le_bytes(buf8);
        out.push(DensifyAccum {
            grad_num,
            grad_den,
            child_grad,
            opacity_acc,
            obs,
            spawn_step,
        });
    }
    Ok(out)
}

/// Save just the scene to a file (no training state).
pub fn save_checkpoint<T: Real>(
    model: &CanonicalModel<T>,
    nets: &GenNets<T>,
    field: &DeformationField<T>,
    path: &Path,
) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_system(&mut w, model, nets, field)
}

/// Load the scene from a file, ignoring any trailing training section.
pub fn load_checkpoint<T: Real>(
    path: &Path,
) -> Result<(CanonicalModel<T>, GenNets<T>, DeformationField<T>)> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    read_system(&mut r)
}
