# Sphinx configuration for the pym2a documentation.

import pathlib
import sys

# autodoc imports the package from the repository root
src_path = pathlib.Path(__file__).parents[1].resolve().as_posix()
sys.path.insert(0, src_path)

extensions = [
    "sphinx.ext.duration",
    "sphinx.ext.doctest",
    "sphinx.ext.autodoc",
    "sphinx.ext.autosummary",
    "myst_parser",
    "sphinx.ext.autosectionlabel",
]

autosectionlabel_prefix_document = True

templates_path = ["_templates"]
source_suffix = {".rst": "restructuredtext", ".md": "markdown"}
master_doc = "index"

project = "pym2a"
copyright = "2024, the pym2a developers"
version = "v0.1.0"
release = "v0.1.0"

exclude_patterns = ["_build"]
pygments_style = "sphinx"

html_theme = "sphinx_rtd_theme"
htmlhelp_basename = "pym2adoc"

latex_documents = [
    ("index", "pym2a.tex", "pym2a Documentation", "the pym2a developers", "manual"),
]
man_pages = [("index", "pym2a", "pym2a Documentation", ["the pym2a developers"], 1)]
