fn main() {
    #[cfg(feature = "gen-header")]
    {
        let dir = std::env::var("CARGO_MANIFEST_DIR").unwrap();
        cbindgen::generate(&dir)
            .expect("cbindgen failed")
            .write_to_file(std::path::Path::new(&dir).join("include/mmvc.h"));
    }
}
