//! Checkpointing: a JSON manifest describing the architecture plus a binary
//! blob of little-endian f64 parameters and running statistics. Round-trips
//! are bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{LayerSpec, NeuralNet};

const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    input_shape: Vec<usize>,
    layers: Vec<LayerSpec>,
    param_len: usize,
    state_len: usize,
}

/// Writes `manifest_path` (JSON) and `blob_path` (params then state, each
/// value as a little-endian f64).
pub fn save(net: &NeuralNet, manifest_path: &Path, blob_path: &Path) -> Result<()> {
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        input_shape: net.input_shape().to_vec(),
        layers: net.layers().to_vec(),
        param_len: net.params().len(),
        state_len: net.state().len(),
    };
    let mut mf = BufWriter::new(File::create(manifest_path)?);
    serde_json::to_writer_pretty(&mut mf, &manifest)?;
    mf.write_all(b"\n")?;
    mf.flush()?;
    let mut bf = BufWriter::new(File::create(blob_path)?);
    for v in net.params().iter().chain(net.state()) {
        bf.write_f64::<LittleEndian>(*v)?;
    }
    bf.flush()?;
    Ok(())
}

/// Reconstructs a network from a manifest/blob pair, validating the
/// architecture and both vector lengths.
pub fn load(manifest_path: &Path, blob_path: &Path) -> Result<NeuralNet> {
    let mf = BufReader::new(File::open(manifest_path)?);
    let manifest: Manifest = serde_json::from_reader(mf)?;
    let bad = |reason: String| Error::Checkpoint {
        path: manifest_path.display().to_string(),
        reason,
    };
    if manifest.format_version != FORMAT_VERSION {
        return Err(bad(format!(
            "unsupported format version {}",
            manifest.format_version
        )));
    }
    let mut net = NeuralNet::new(manifest.input_shape, manifest.layers)?;
    if net.params().len() != manifest.param_len || net.state().len() != manifest.state_len {
        return Err(bad(format!(
            "manifest lengths ({}, {}) do not match architecture ({}, {})",
            manifest.param_len,
            manifest.state_len,
            net.params().len(),
            net.state().len()
        )));
    }
    let mut bf = BufReader::new(File::open(blob_path)?);
    let total = manifest.param_len + manifest.state_len;
    let mut values = vec![0.0f64; total];
    bf.read_f64_into::<LittleEndian>(&mut values)?;
    let mut trailing = [0u8; 1];
    if bf.read(&mut trailing)? != 0 {
        return Err(Error::Checkpoint {
            path: blob_path.display().to_string(),
            reason: "blob longer than manifest declares".into(),
        });
    }
    net.params_mut().copy_from_slice(&values[..manifest.param_len]);
    net.state_mut().copy_from_slice(&values[manifest.param_len..]);
    Ok(net)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Padding;

    fn sample_net() -> NeuralNet {
        let mut net = NeuralNet::new(
            vec![1, 6, 6],
            vec![
                LayerSpec::Conv2d {
                    in_channels: 1,
                    out_channels: 3,
                    kernel: 3,
                    stride: 1,
                    padding: Padding::Same,
                },
                LayerSpec::BatchNorm2d { channels: 3 },
                LayerSpec::Relu,
                LayerSpec::Flatten,
                LayerSpec::Dense { input: 108, output: 4 },
            ],
        )
        .unwrap();
        net.glorot_init(42);
        net
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut net = sample_net();
        // Give the running stats non-default values too.
        let x = crate::tensor::Tensor::from_values(
            &[2, 1, 6, 6],
            (0..72).map(|i| (i as f64).sin()).collect(),
        )
        .unwrap();
        let _ = net.forward_train(&x).unwrap();
        let manifest = dir.path().join("net.json");
        let blob = dir.path().join("net.bin");
        save(&net, &manifest, &blob).unwrap();
        let loaded = load(&manifest, &blob).unwrap();
        assert_eq!(net.params(), loaded.params());
        assert_eq!(net.state(), loaded.state());
        assert_eq!(net.layers(), loaded.layers());
        // Saving the loaded net reproduces the blob byte for byte.
        let blob2 = dir.path().join("net2.bin");
        save(&loaded, dir.path().join("net2.json").as_path(), &blob2).unwrap();
        assert_eq!(std::fs::read(&blob).unwrap(), std::fs::read(&blob2).unwrap());
    }

    #[test]
    fn truncated_blob_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let net = sample_net();
        let manifest = dir.path().join("net.json");
        let blob = dir.path().join("net.bin");
        save(&net, &manifest, &blob).unwrap();
        let bytes = std::fs::read(&blob).unwrap();
        std::fs::write(&blob, &bytes[..bytes.len() - 8]).unwrap();
        assert!(load(&manifest, &blob).is_err());
        // And a padded blob as well.
        let mut longer = bytes.clone();
        longer.extend_from_slice(&[0u8; 8]);
        std::fs::write(&blob, &longer).unwrap();
        assert!(load(&manifest, &blob).is_err());
    }
}
