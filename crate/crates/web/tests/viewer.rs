use pgav_web::Viewer;

#[test]
fn prefix_level_and_order_controls() {
    let mut v = Viewer::fit(3, 24, 30).unwrap_or_else(|_| panic!("fit failed"));
    let full = v.render().ok().unwrap();
    assert_eq!(full.len(), 24 * 24 * 4);
    assert!(full.chunks(4).all(|p| p[3] == 255));
    let records = v.records_shown();
    let nodes = v.nodes_shown();
    assert_eq!(nodes, 320 + 3 * records);

    v.set_prefix(0.0);
    v.render().ok().unwrap();
    assert_eq!((v.nodes_shown(), v.records_shown()), (320, 0));

    v.set_prefix(1.0);
    v.set_level(0);
    v.render().ok().unwrap();
    assert_eq!(v.nodes_shown(), 320);

    v.set_level(-1);
    v.set_random_order(true);
    v.set_azimuth(90.0);
    let shuffled = v.render().ok().unwrap();
    assert_eq!(v.nodes_shown(), nodes);
    assert_eq!(shuffled.len(), full.len());
}
