//! NPY v1.0 reading and writing (little-endian, C order, `<f4` / `<f8`).

use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::Path;

use npyz::{DType, TypeStr, WriterBuilder};

use super::{Dtype, DumpManifest, FeatureMapSet};
use crate::error::{Error, Result};

const MAGIC: &[u8; 6] = b"\x93NUMPY";

/// A dense array as read from an NPY file, values widened to f64.
#[derive(Debug, Clone, PartialEq)]
pub struct NpyArray {
    pub shape: Vec<usize>,
    pub dtype: Dtype,
    pub data: Vec<f64>,
}

/// Reads any v1.0 little-endian C-order float array.
pub fn read_npy(path: &Path) -> Result<NpyArray> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let malformed = |reason: String| Error::MalformedNpy {
        path: path.to_path_buf(),
        reason,
    };
    if bytes.len() < 10 || &bytes[..6] != MAGIC {
        return Err(malformed("missing \\x93NUMPY magic".into()));
    }
    let (major, minor) = (bytes[6], bytes[7]);
    if (major, minor) != (1, 0) {
        return Err(Error::UnsupportedNpyVersion {
            path: path.to_path_buf(),
            major,
            minor,
        });
    }
    let npy = npyz::NpyFile::new(&bytes[..]).map_err(|e| malformed(e.to_string()))?;
    if npy.order() != npyz::Order::C {
        return Err(malformed("Fortran-order arrays are not supported".into()));
    }
    let shape: Vec<usize> = npy.shape().iter().map(|&d| d as usize).collect();
    let descr = match npy.dtype() {
        DType::Plain(ts) => ts.to_string(),
        other => return Err(malformed(format!("unsupported dtype {}", other.descr()))),
    };
    let (dtype, data) = match descr.as_str() {
        "<f4" => {
            let v: Vec<f32> = npy.into_vec().map_err(|e| malformed(e.to_string()))?;
            (Dtype::F32, v.into_iter().map(f64::from).collect())
        }
        "<f8" => {
            let v: Vec<f64> = npy.into_vec().map_err(|e| malformed(e.to_string()))?;
            (Dtype::F64, v)
        }
        other => {
            return Err(malformed(format!(
                "unsupported dtype {other}; expected <f4 or <f8"
            )))
        }
    };
    Ok(NpyArray { shape, dtype, data })
}

/// Writes a C-order array as NPY v1.0 at the given dtype.
pub fn write_npy(path: &Path, shape: &[usize], data: &[f64], dtype: Dtype) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let shape: Vec<u64> = shape.iter().map(|&d| d as u64).collect();
    let io_result = match dtype {
        Dtype::F32 => write_typed(&mut out, &shape, data.iter().map(|&v| v as f32), "<f4"),
        Dtype::F64 => write_typed(&mut out, &shape, data.iter().copied(), "<f8"),
    }
    .and_then(|()| out.flush());
    io_result.map_err(|e| Error::io(path, e))
}

fn write_typed<T, W>(
    out: &mut W,
    shape: &[u64],
    values: impl Iterator<Item = T>,
    descr: &str,
) -> io::Result<()>
where
    T: npyz::Serialize,
    W: Write,
{
    let ts: TypeStr = descr.parse().expect("static type string");
    let mut writer = npyz::WriteOptions::new()
        .dtype(DType::Plain(ts))
        .shape(shape)
        .writer(out)
        .begin_nd()?;
    writer.extend(values)?;
    writer.finish()
}

/// Loads one sample of one layer, checking it against the manifest.
pub fn load_feature_maps(
    path: &Path,
    manifest: &DumpManifest,
    layer_id: &str,
    sample_id: usize,
) -> Result<FeatureMapSet> {
    let entry = manifest
        .layer(layer_id)
        .ok_or_else(|| Error::UnknownLayer(layer_id.to_string()))?;
    let array = read_npy(path)?;
    let expected = vec![entry.c, entry.h, entry.w];
    if array.shape != expected {
        return Err(Error::ShapeMismatch {
            layer_id: layer_id.to_string(),
            expected,
            found: array.shape,
        });
    }
    FeatureMapSet::new(layer_id, sample_id, [entry.c, entry.h, entry.w], array.data)
}

/// Writes a feature-map set as a 3-D NPY array.
pub fn write_feature_maps(fms: &FeatureMapSet, path: &Path, dtype: Dtype) -> Result<()> {
    write_npy(path, &fms.shape(), fms.data(), dtype)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor_io::LayerEntry;
    use rand::{Rng, SeedableRng};

    fn manifest(c: usize, h: usize, w: usize, dtype: Dtype) -> DumpManifest {
        DumpManifest {
            model_name: "test".into(),
            layers: vec![LayerEntry {
                layer_id: "conv1".into(),
                c,
                h,
                w,
                file_pattern: "{layer}_{sample}.npy".into(),
            }],
            num_samples: 1,
            dtype,
            capture_point: None,
        }
    }

    fn random_fms(shape: [usize; 3], seed: u64) -> FeatureMapSet {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        FeatureMapSet::new("conv1", 0, shape, data).unwrap()
    }

    #[test]
    fn f32_file_loads_with_manifest_shape() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.npy");
        let fms = random_fms([16, 8, 8], 1);
        write_feature_maps(&fms, &path, Dtype::F32).unwrap();
        let loaded = load_feature_maps(&path, &manifest(16, 8, 8, Dtype::F32), "conv1", 0).unwrap();
        assert_eq!(loaded.shape(), [16, 8, 8]);
        for (a, b) in loaded.data().iter().zip(fms.data()) {
            assert_eq!(*a, f64::from(*b as f32));
        }
    }

    #[test]
    fn f64_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.npy");
        let fms = random_fms([8, 4, 4], 2);
        write_feature_maps(&fms, &path, Dtype::F64).unwrap();
        let loaded = load_feature_maps(&path, &manifest(8, 4, 4, Dtype::F64), "conv1", 0).unwrap();
        assert_eq!(loaded, fms);
    }

    #[test]
    fn f32_narrowing_stays_within_rounding() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.npy");
        let fms = random_fms([8, 4, 4], 3);
        write_feature_maps(&fms, &path, Dtype::F32).unwrap();
        let loaded = load_feature_maps(&path, &manifest(8, 4, 4, Dtype::F32), "conv1", 0).unwrap();
        for (a, b) in loaded.data().iter().zip(fms.data()) {
            assert!((a - b).abs() <= b.abs() * f64::from(f32::EPSILON));
        }
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.npy");
        write_npy(&path, &[16, 64], &vec![0.0; 16 * 64], Dtype::F32).unwrap();
        let err =
            load_feature_maps(&path, &manifest(16, 8, 8, Dtype::F32), "conv1", 0).unwrap_err();
        match err {
            Error::ShapeMismatch {
                expected, found, ..
            } => {
                assert_eq!(expected, vec![16, 8, 8]);
                assert_eq!(found, vec![16, 64]);
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn nan_is_reported_with_layer_and_sample() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.npy");
        let mut data = vec![1.0; 2 * 2 * 2];
        data[5] = f64::NAN;
        write_npy(&path, &[2, 2, 2], &data, Dtype::F64).unwrap();
        let err = load_feature_maps(&path, &manifest(2, 2, 2, Dtype::F64), "conv1", 4).unwrap_err();
        assert!(matches!(
            err,
            Error::NonFinite {
                sample_id: 4,
                index: 5,
                ..
            }
        ));
        assert!(err.to_string().contains("conv1"));
    }

    #[test]
    fn rejects_v2_header_and_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.npy");
        write_npy(&path, &[2], &[1.0, 2.0], Dtype::F64).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[6] = 2;
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            read_npy(&path).unwrap_err(),
            Error::UnsupportedNpyVersion { major: 2, .. }
        ));

        fs::write(&path, b"not an npy file at all").unwrap();
        assert!(matches!(
            read_npy(&path).unwrap_err(),
            Error::MalformedNpy { .. }
        ));

        // Truncated payload.
        write_npy(&path, &[4], &[1.0, 2.0, 3.0, 4.0], Dtype::F64).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 8]).unwrap();
        assert!(matches!(
            read_npy(&path).unwrap_err(),
            Error::MalformedNpy { .. }
        ));
    }

    #[test]
    fn header_is_v1_little_endian() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.npy");
        write_npy(&path, &[3, 2, 2], &[0.0; 12], Dtype::F32).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert_eq!(&bytes[..8], b"\x93NUMPY\x01\x00");
        let header_len = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
        assert_eq!((10 + header_len) % 64, 0);
        let header = std::str::from_utf8(&bytes[10..10 + header_len]).unwrap();
        assert!(header.contains("'descr': '<f4'"));
        assert!(header.contains("'fortran_order': False"));
        assert!(header.contains("'shape': (3, 2, 2"), "{header}");
    }

    #[test]
    fn write_to_missing_dir_fails() {
        let dir = tempfile::tempdir().unwrap();
        let fms = random_fms([2, 2, 2], 5);
        let err = write_feature_maps(&fms, &dir.path().join("nope/x.npy"), Dtype::F32).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }

    #[cfg(unix)]
    #[test]
    fn write_to_read_only_dir_fails() {
        use std::os::unix::fs::PermissionsExt;
        let dir = tempfile::tempdir().unwrap();
        let ro = dir.path().join("ro");
        fs::create_dir(&ro).unwrap();
        fs::set_permissions(&ro, fs::Permissions::from_mode(0o555)).unwrap();
        let fms = random_fms([2, 2, 2], 4);
        let result = write_feature_maps(&fms, &ro.join("x.npy"), Dtype::F32);
        fs::set_permissions(&ro, fs::Permissions::from_mode(0o755)).unwrap();
        // Root ignores directory permissions; only assert when the OS enforced them.
        if !ro.join("x.npy").exists() {
            assert!(matches!(result.unwrap_err(), Error::Io { .. }));
        }
    }
}
