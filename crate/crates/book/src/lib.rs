//! Guide listings compiled as doctests.

macro_rules! chapter {
    ($name:ident, $file:literal) => {
        #[doc = include_str!(concat!("../../../book/src/", $file))]
        pub mod $name {}
    };
}

chapter!(overview, "overview.md");
chapter!(layers, "layers.md");
chapter!(networks, "networks.md");
chapter!(regions, "regions.md");
chapter!(descriptors, "descriptors.md");
chapter!(routing, "routing.md");
chapter!(retrieval, "retrieval.md");
chapter!(evaluation, "evaluation.md");
chapter!(synthetic, "synthetic.md");
chapter!(cli, "cli.md");
chapter!(formats, "formats.md");
