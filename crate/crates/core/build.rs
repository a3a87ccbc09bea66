fn main() {
    // LAPACK symbols (dsyevd) come from the system OpenBLAS.
    println!("cargo:rustc-link-lib=dylib=openblas");
}
