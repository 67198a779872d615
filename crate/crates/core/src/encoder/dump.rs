//! Attention-map CSV dumps: one file per (layer, head, map-type), rows are
//! queries and columns keys, header `query_index,key_0,...,key_K`.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use super::HybridOutputs;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn write_map<E: Scalar>(path: &Path, map: &Tensor<E>, head: usize) -> std::io::Result<()> {
    let s = map.shape()[1];
    let k = map.shape()[2];
    let mut w = BufWriter::new(File::create(path)?);
    write!(w, "query_index")?;
    for j in 0..k {
        write!(w, ",key_{j}")?;
    }
    writeln!(w)?;
    let base = head * s * k;
    for q in 0..s {
        write!(w, "{q}")?;
        for j in 0..k {
            write!(w, ",{}", map.data()[base + q * k + j].to_f64())?;
        }
        writeln!(w)?;
    }
    w.flush()
}

/// Writes every retained map under `dir`. Encoder self-attention maps go
/// to `encoder_layer{L}_head{H}_self.csv`; hybrid maps to
/// `hybrid_head{H}_{t2t|t2v|v2v|v2t}.csv`. Returns the file names written.
pub fn dump_attention<E: Scalar>(outputs: &HybridOutputs<E>, dir: &Path) -> std::io::Result<Vec<String>> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    for (l, map) in outputs.encoder_maps.iter().enumerate() {
        for h in 0..map.shape()[0] {
            let name = format!("encoder_layer{l}_head{h}_self.csv");
            write_map(&dir.join(&name), map, h)?;
            written.push(name);
        }
    }
    let hybrid: [(&str, Option<&Tensor<E>>); 4] = [
        ("t2t", Some(&outputs.map_t2t)),
        ("t2v", outputs.map_t2v.as_ref()),
        ("v2v", Some(&outputs.map_v2v)),
        ("v2t", outputs.map_v2t.as_ref()),
    ];
    for (kind, map) in hybrid {
        if let Some(map) = map {
            for h in 0..map.shape()[0] {
                let name = format!("hybrid_head{h}_{kind}.csv");
                write_map(&dir.join(&name), map, h)?;
                written.push(name);
            }
        }
    }
    Ok(written)
}
