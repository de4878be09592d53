//! Regenerates the vendored dataset snapshots under data/.
fn main() {
    let dir = std::path::PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "data".into()));
    let manifest = odgpssm_cli::datagen::write_all(&dir).unwrap();
    println!("wrote {} files + manifest to {}", manifest.files.len(), dir.display());
}
