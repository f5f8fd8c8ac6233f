//! Generates the three synthetic classes, writes them as GWAD files with a
//! manifest, and reads everything back.

use gwanomaly::dataio::{
    generate_synthetic, read_dataset, write_gwad, write_manifest, Injection, ManifestEntry, SynthConfig,
};

fn main() -> gwanomaly::Result<()> {
    let cfg = SynthConfig { seed: 42, ..SynthConfig::default().with_counts(50) };
    let set = generate_synthetic(&cfg)?;
    let data = &set.dataset;

    for (id, class) in data.classes().iter().enumerate() {
        let sub = data.class_subset(id);
        let energy: f64 = sub.values().iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / sub.values().len() as f64;
        println!("{:<10} label {}  {} samples  mean power {energy:.3}", class.name, class.label, sub.len());
    }
    if let Some(Injection::Bbh(p)) = set.injections.iter().find(|i| matches!(i, Injection::Bbh(_))) {
        println!("first chirp: {p:?}");
    }

    let dir = tempfile::tempdir()?;
    let mut entries = Vec::new();
    for (id, class) in data.classes().iter().enumerate() {
        let path = dir.path().join(format!("{}.gwad", class.name));
        write_gwad(&path, &data.class_subset(id).to_array())?;
        entries.push(ManifestEntry { class_name: class.name.clone(), path, label: class.label });
    }
    let manifest = dir.path().join("manifest.tsv");
    write_manifest(&manifest, &entries)?;
    let back = read_dataset(&manifest)?;
    println!("round trip through {}: {} samples, identical = {}", manifest.display(), back.len(), back.values() == data.values());
    Ok(())
}
