import importlib.util
from pathlib import Path

from incdet.core import ClassPartition
from incdet.data import audit_cooccurrence, dataset_from_dict

SCRIPT = Path(__file__).resolve().parents[1] / "scripts" / "voc_to_json.py"


def load_script():
    loader_spec = importlib.util.spec_from_file_location("voc_to_json", SCRIPT)
    mod = importlib.util.module_from_spec(loader_spec)
    loader_spec.loader.exec_module(mod)
    return mod


XML = """<annotation><size><width>100</width><height>80</height><depth>3</depth></size>{objects}</annotation>"""
OBJ = """<object><name>{name}</name><difficult>{d}</difficult>
<bndbox><xmin>{b[0]}</xmin><ymin>{b[1]}</ymin><xmax>{b[2]}</xmax><ymax>{b[3]}</ymax></bndbox></object>"""


def fake_voc(root: Path):
    (root / "Annotations").mkdir(parents=True)
    (root / "ImageSets" / "Main").mkdir(parents=True)
    files = {
        "000001": [("tvmonitor", 0, (1, 1, 100, 80)), ("chair", 0, (10, 10, 20, 30)), ("chair", 1, (30, 10, 40, 30))],
        "000002": [("person", 0, (5, 5, 50, 60))],
    }
    for stem, objs in files.items():
        body = "".join(OBJ.format(name=n, d=d, b=b) for n, d, b in objs)
        (root / "Annotations" / f"{stem}.xml").write_text(XML.format(objects=body))
    (root / "ImageSets" / "Main" / "trainval.txt").write_text("000001\n000002\n")


def test_convert_and_audit(tmp_path):
    mod = load_script()
    fake_voc(tmp_path / "VOC")
    doc = mod.convert(tmp_path / "VOC", "trainval")
    ds = dataset_from_dict(doc)
    assert len(ds) == 2 and len(doc["annotations"]) == 4
    assert doc["annotations"][0]["bbox"] == [0.0, 0.0, 100.0, 80.0]
    assert doc["annotations"][1]["bbox"] == [9.0, 9.0, 20.0, 30.0]
    table = audit_cooccurrence(ds, ClassPartition(tuple(range(19)), ((19,),)))
    assert table.count("novel", "tvmonitor") == 1
    assert table.count("novel", "chair") == 2
    assert table.count("novel", "person") == 0
    assert len(mod.convert(tmp_path / "VOC", "trainval", skip_difficult=True)["annotations"]) == 3
    out = tmp_path / "voc.json"
    assert mod.main([str(tmp_path / "VOC"), "--out", str(out)]) == 0 and out.is_file()
