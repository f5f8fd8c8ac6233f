use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use crate::autodiff::DiffArray;
use crate::binio::{check_crc, f32_from_payload, f32_payload, push_crc, Cursor};
use crate::error::{domain_err, Error, Result};

use super::LabeledDataset;

pub const GWAD_MAGIC: &[u8; 4] = b"GWAD";
pub const GWAD_VERSION: u16 = 1;
const DTYPE_F32: u8 = 0;

/// Serializes an array: magic, version, dtype, rank, dims, payload, CRC32 of
/// everything before it.
pub fn encode_gwad(array: &DiffArray<f32>) -> Result<Vec<u8>> {
    if !array.is_finite() {
        return Err(domain_err!("refusing to write non-finite values"));
    }
    if array.rank() > u8::MAX as usize {
        return Err(domain_err!("rank {} does not fit the header", array.rank()));
    }
    let mut out = Vec::with_capacity(12 + 8 * array.rank() + 4 * array.numel());
    out.extend_from_slice(GWAD_MAGIC);
    out.extend_from_slice(&GWAD_VERSION.to_le_bytes());
    out.push(DTYPE_F32);
    out.push(array.rank() as u8);
    for &d in array.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    out.extend_from_slice(&f32_payload(array.data()));
    push_crc(&mut out);
    Ok(out)
}

pub fn decode_gwad(bytes: &[u8]) -> Result<DiffArray<f32>> {
    let corrupt = |m: &str| Error::CorruptFile(m.to_string());
    if bytes.len() < 4 || &bytes[..4] != GWAD_MAGIC {
        return Err(Error::Format("not a GWAD file (bad magic)".into()));
    }
    let mut cur = Cursor::new(bytes);
    cur.take(4);
    let version = cur.u16().ok_or_else(|| corrupt("truncated header"))?;
    if version != GWAD_VERSION {
        return Err(Error::Format(format!("unsupported GWAD version {version}")));
    }
    let dtype = cur.u8().ok_or_else(|| corrupt("truncated header"))?;
    if dtype != DTYPE_F32 {
        return Err(Error::Format(format!("unsupported dtype code {dtype}")));
    }
    let body = check_crc(bytes).map_err(Error::CorruptFile)?;
    let mut cur = Cursor::new(body);
    cur.take(7);
    let rank = cur.u8().ok_or_else(|| corrupt("truncated header"))? as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let d = cur.u64().ok_or_else(|| corrupt("truncated dims"))?;
        shape.push(usize::try_from(d).map_err(|_| corrupt("dimension overflow"))?);
    }
    let numel = shape
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or_else(|| corrupt("dimension overflow"))?;
    if numel.checked_mul(4) != Some(cur.remaining()) {
        return Err(Error::CorruptFile(format!(
            "header declares {numel} values, payload holds {} bytes",
            cur.remaining()
        )));
    }
    let payload = cur.take(cur.remaining()).unwrap_or_default();
    DiffArray::new(shape, f32_from_payload(payload))
}

pub fn write_gwad(path: impl AsRef<Path>, array: &DiffArray<f32>) -> Result<()> {
    fs::write(path, encode_gwad(array)?)?;
    Ok(())
}

pub fn read_gwad(path: impl AsRef<Path>) -> Result<DiffArray<f32>> {
    decode_gwad(&fs::read(path)?)
}

/// One `class_name<TAB>path<TAB>label` line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub class_name: String,
    pub path: PathBuf,
    pub label: u8,
}

/// Reads a manifest; relative paths resolve against the manifest's
/// directory.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| match e.kind() {
        io::ErrorKind::NotFound => Error::Format(format!("manifest {} not found", path.display())),
        _ => Error::Io(e),
    })?;
    let base = path.parent().unwrap_or(Path::new(""));
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let bad = |m: &str| Error::Format(format!("{}:{}: {m}", path.display(), n + 1));
        if fields.len() != 3 {
            return Err(bad("expected class<TAB>path<TAB>label"));
        }
        let label = match fields[2].trim() {
            "0" => 0,
            "1" => 1,
            _ => return Err(bad("label must be 0 or 1")),
        };
        let p = PathBuf::from(fields[1]);
        out.push(ManifestEntry {
            class_name: fields[0].to_string(),
            path: if p.is_absolute() { p } else { base.join(p) },
            label,
        });
    }
    Ok(out)
}

/// Writes entries with paths relative to the manifest directory when
/// possible.
pub fn write_manifest(path: impl AsRef<Path>, entries: &[ManifestEntry]) -> Result<()> {
    let path = path.as_ref();
    let base = path.parent().unwrap_or(Path::new(""));
    let mut text = String::new();
    for e in entries {
        let p = e.path.strip_prefix(base).unwrap_or(&e.path);
        text.push_str(&format!("{}\t{}\t{}\n", e.class_name, p.display(), e.label));
    }
    fs::write(path, text)?;
    Ok(())
}

/// Loads every class file listed in a manifest into one dataset, in
/// manifest order.
pub fn read_dataset(manifest: impl AsRef<Path>) -> Result<LabeledDataset> {
    let mut d = LabeledDataset::new();
    for e in read_manifest(manifest)? {
        let arr = read_gwad(&e.path)?;
        d.extend_class(&e.class_name, e.label, &arr)?;
    }
    Ok(d)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn bits(a: &DiffArray<f32>) -> Vec<u32> {
        a.data().iter().map(|v| v.to_bits()).collect()
    }

    #[test]
    fn round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.gwad");
        let data: Vec<f32> = (0..100 * 400).map(|i| ((i * 37) % 1001) as f32 / 7.0 - 60.0).collect();
        let a = DiffArray::new(vec![100, 200, 2], data).unwrap();
        write_gwad(&p, &a).unwrap();
        let b = read_gwad(&p).unwrap();
        assert_eq!(b.shape(), a.shape());
        assert_eq!(bits(&a), bits(&b));

        let r1 = DiffArray::from_vec(vec![-0.0f32, 0.0, 1.5, f32::MIN_POSITIVE, f32::MAX]);
        let back = decode_gwad(&encode_gwad(&r1).unwrap()).unwrap();
        assert_eq!(back.shape(), &[5]);
        assert_eq!(bits(&r1), bits(&back));

        let empty = DiffArray::<f32>::zeros(&[0, 200, 2]);
        assert_eq!(decode_gwad(&encode_gwad(&empty).unwrap()).unwrap().shape(), &[0, 200, 2]);
    }

    /// Rebuilds a file whose header claims more values than it carries,
    /// with a valid checksum so only the size check can catch it.
    #[test]
    fn short_payload_is_corrupt() {
        let a = DiffArray::from_vec(vec![1.0f32; 9]);
        let mut bytes = encode_gwad(&a).unwrap();
        bytes.truncate(bytes.len() - 4);
        bytes[8..16].copy_from_slice(&10u64.to_le_bytes());
        push_crc(&mut bytes);
        assert!(matches!(decode_gwad(&bytes), Err(Error::CorruptFile(_))));
    }

    #[test]
    fn corruption_classes() {
        let a = DiffArray::from_vec(vec![1.0f32, 2.0, 3.0]);
        let good = encode_gwad(&a).unwrap();
        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        assert!(matches!(decode_gwad(&bad_magic), Err(Error::Format(_))));
        assert!(matches!(decode_gwad(&good[..good.len() - 3]), Err(Error::CorruptFile(_))));
        assert!(matches!(decode_gwad(&good[..6]), Err(Error::CorruptFile(_))));
        let mut flipped = good.clone();
        flipped[20] ^= 0x10;
        assert!(matches!(decode_gwad(&flipped), Err(Error::CorruptFile(_))));
        let mut version = good.clone();
        version[4] = 2;
        assert!(matches!(decode_gwad(&version), Err(Error::Format(_))));
        let nan = DiffArray::from_vec(vec![f32::NAN]);
        assert!(matches!(encode_gwad(&nan), Err(Error::Domain(_))));
    }

    #[test]
    fn manifest_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let m = dir.path().join("manifest.tsv");
        let entries = vec![
            ManifestEntry {
                class_name: "background".into(),
                path: dir.path().join("background.gwad"),
                label: 0,
            },
            ManifestEntry {
                class_name: "bbh".into(),
                path: dir.path().join("bbh.gwad"),
                label: 1,
            },
        ];
        write_manifest(&m, &entries).unwrap();
        assert_eq!(fs::read_to_string(&m).unwrap(), "background\tbackground.gwad\t0\nbbh\tbbh.gwad\t1\n");
        assert_eq!(read_manifest(&m).unwrap(), entries);
        assert!(matches!(read_manifest(dir.path().join("missing.tsv")), Err(Error::Format(_))));
        fs::write(&m, "bbh\tx.gwad\t2\n").unwrap();
        assert!(matches!(read_manifest(&m), Err(Error::Format(_))));
    }

    proptest! {
        #[test]
        fn any_finite_values_round_trip(bits_in in prop::collection::vec(any::<u32>(), 0..300)) {
            let vals: Vec<f32> = bits_in.into_iter().map(f32::from_bits).filter(|v| v.is_finite()).collect();
            let a = DiffArray::from_vec(vals);
            let b = decode_gwad(&encode_gwad(&a).unwrap()).unwrap();
            prop_assert_eq!(bits(&a), bits(&b));
        }
    }
}
