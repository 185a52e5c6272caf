import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from s4od.detector import Detection, DetectorConfig, DetectorParams
from s4od.formats import FormatError, load_annotations, load_detections, save_annotations, save_detections
from s4od.geometry import BBox
from s4od.scenegen import SceneConfig, generate_dataset
from s4od.selector import SelectorConfig, SelectorParams

finite = st.floats(-1e6, 1e6, allow_nan=False, allow_infinity=False)
positive = st.floats(1e-6, 1e6, allow_nan=False, allow_infinity=False)
boxes = st.builds(BBox, finite, finite, positive, positive)


@settings(max_examples=50)
@given(st.dictionaries(st.integers(0, 10**6), st.lists(st.tuples(boxes, st.floats(0, 1)), max_size=4), max_size=5))
def test_detections_round_trip_bitwise(tmp_path_factory, dets):
    path = tmp_path_factory.mktemp("d") / "dets.json"
    src = {i: [Detection(b, s) for b, s in v] for i, v in dets.items()}
    save_detections(path, src)
    back = load_detections(path)
    assert {i: [(d.box, d.score) for d in v] for i, v in back.items()} == \
        {i: [(d.box, d.score) for d in v] for i, v in src.items() if v}


def test_annotations_round_trip(tmp_path):
    scenes = generate_dataset(SceneConfig(annotation_jitter=1.5), 8, np.random.default_rng(0))
    save_annotations(tmp_path / "a.json", scenes)
    got = load_annotations(tmp_path / "a.json")
    assert got.images == {s.image_id: (64, 64) for s in scenes}
    assert got.boxes == {s.image_id: s.gt_boxes for s in scenes}


def test_params_round_trip(tmp_path):
    cfg = DetectorConfig(d_feat=4)
    p = DetectorParams.init(cfg, np.random.default_rng(0))
    p.raw_mean = np.random.default_rng(1).normal(size=cfg.d_raw)
    p.save(tmp_path / "p.json")
    q = DetectorParams.load(tmp_path / "p.json")
    assert q.tobytes() == p.tobytes() and q.config == cfg

    s = SelectorParams.init(16, SelectorConfig(hidden_roi=5, hidden_meta=3), np.random.default_rng(2))
    s.save(tmp_path / "s.json")
    t = SelectorParams.load(tmp_path / "s.json")
    assert np.array_equal(t.flat(), s.flat()) and t.config == s.config


def _ann(**over):
    doc = {"images": [{"id": 1, "width": 64, "height": 64}],
           "annotations": [{"id": 1, "image_id": 1, "bbox": [1, 2, 3, 4], "category_id": 1}],
           "categories": [{"id": 1, "name": "object"}]}
    doc["annotations"][0].update(over)
    return doc


@pytest.mark.parametrize("doc, needle", [
    (_ann(bbox=[1, 2, -3, 4]), "width must be > 0"),
    (_ann(bbox=[1, 2, 3]), "expected [x, y, w, h]"),
    (_ann(bbox=[1, "a", 3, 4]), "bbox[1]"),
    (_ann(image_id=7), "unknown image id 7"),
    (_ann(category_id=2), "category_id"),
    ({"images": []}, "missing field 'annotations'"),
    ([], "top level"),
])
def test_malformed_annotations_are_rejected_with_location(tmp_path, doc, needle):
    p = tmp_path / "a.json"
    p.write_text(json.dumps(doc))
    with pytest.raises(FormatError) as e:
        load_annotations(p)
    assert needle in str(e.value)
    assert str(p) in str(e.value)


def test_invalid_json_reports_line(tmp_path):
    p = tmp_path / "a.json"
    p.write_text('{"images": [\n  oops]}')
    with pytest.raises(FormatError, match=r":2:"):
        load_annotations(p)


@pytest.mark.parametrize("entry, needle", [
    ({"image_id": 1, "category_id": 1, "bbox": [0, 0, 1, 1], "score": 1.5}, "outside [0, 1]"),
    ({"image_id": 1, "category_id": 1, "bbox": [0, 0, 1, 1]}, "missing field 'score'"),
    ({"image_id": 1.5, "category_id": 1, "bbox": [0, 0, 1, 1], "score": 0.5}, "expected an integer"),
])
def test_malformed_detections_are_rejected(tmp_path, entry, needle):
    p = tmp_path / "d.json"
    p.write_text(json.dumps([entry]))
    with pytest.raises(FormatError, match=needle.replace("[", r"\[").replace("]", r"\]")):
        load_detections(p)


def test_saving_out_of_range_score_fails(tmp_path):
    with pytest.raises(FormatError):
        save_detections(tmp_path / "d.json", {1: [Detection(BBox(0, 0, 1, 1), 1.2)]})


def test_params_wrong_format_tag(tmp_path):
    s = SelectorParams.zeros(4, SelectorConfig(hidden_roi=2, hidden_meta=2))
    s.save(tmp_path / "s.json")
    with pytest.raises(FormatError, match="format tag"):
        DetectorParams.load(tmp_path / "s.json")
