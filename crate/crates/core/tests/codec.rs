use hitpix_core::image::{decode, encode, stitch_pairs, AddressImage, StitchedImage};
use hitpix_core::{Address, Prefix, PrefixTable};
use proptest::prelude::*;

proptest! {
    #[test]
    fn text_and_image_round_trip(v in any::<u128>()) {
        let a = Address(v);
        prop_assert_eq!(decode(&encode(a)), a);
        prop_assert_eq!(a.to_string().parse::<Address>().unwrap(), a);
        prop_assert_eq!(a.to_full_hex().len(), 32);
    }

    #[test]
    fn pixel_g_j_is_bit_16g_plus_j(v in any::<u128>(), g in 0usize..8, j in 0usize..16) {
        let a = Address(v);
        let img = AddressImage::encode(a);
        prop_assert_eq!(img.pixel(g, j) == 1, a.bit(16 * g + j));
        prop_assert_eq!(img.rows()[g], a.group(g));
    }

    #[test]
    fn float_image_round_trips(v in any::<u128>()) {
        let img = AddressImage::encode(Address(v));
        prop_assert_eq!(AddressImage::from_values(&img.to_f32()).unwrap(), img);
    }

    #[test]
    fn stitched_halves_are_neighbours(vs in prop::collection::vec(any::<u128>(), 1..12), fanout in 1usize..4) {
        let images: Vec<AddressImage> = vs.iter().map(|&v| AddressImage::encode(Address(v))).collect();
        let pairs: Vec<StitchedImage> = stitch_pairs(&images, fanout).unwrap();
        if images.len() == 1 {
            prop_assert_eq!(pairs.len(), 1);
        } else {
            // distances wrap around, so at most n - 1 distinct partners
            prop_assert_eq!(pairs.len(), images.len() * fanout.min(images.len() - 1));
        }
        for p in &pairs {
            let (top, bottom) = p.halves();
            prop_assert!(vs.contains(&top.0) && vs.contains(&bottom.0));
        }
    }

    #[test]
    fn longest_match_wins(v in any::<u128>(), short in 8u8..40, extra in 1u8..40) {
        let a = Address(v);
        let long = short + extra;
        let mut table = PrefixTable::new();
        let outer = Prefix::new(a, short);
        let inner = Prefix::new(a, long);
        table.insert(outer);
        table.insert(inner);
        prop_assert_eq!(table.longest_match(a), Some(inner));
        let sibling = a.with_bit(long as usize - 1, !a.bit(long as usize - 1));
        prop_assert_eq!(table.longest_match(sibling), Some(outer));
    }
}

#[test]
fn worked_example_first_row() {
    let a: Address = "2804:30d0:200:200:100:116:0:b".parse().unwrap();
    assert_eq!(format!("{:016b}", encode(a).rows()[0]), "0010100000000100");
}
