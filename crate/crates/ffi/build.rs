use std::path::PathBuf;

fn main() {
    let dir = PathBuf::from(std::env::var("CARGO_MANIFEST_DIR").unwrap());
    println!("cargo:rerun-if-changed=src/lib.rs");
    println!("cargo:rerun-if-changed=cbindgen.toml");
    let config = cbindgen::Config::from_file(dir.join("cbindgen.toml")).expect("cbindgen.toml");
    let header = dir.join("include").join("vmae.h");
    match cbindgen::generate_with_config(&dir, config) {
        Ok(b) => {
            b.write_to_file(&header);
        }
        // Keep the checked-in header when the source does not parse yet;
        // rustc reports the real error.
        Err(e) => println!("cargo:warning=cbindgen: {e}"),
    }
}
