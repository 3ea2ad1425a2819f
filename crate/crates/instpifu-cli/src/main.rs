fn main() {
    println!("instpifu");
}
