fn main() {
    mvp::cli::main()
}
