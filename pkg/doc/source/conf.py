#  odskd documentation build configuration file
#
# Refer to the Sphinx documentation for advice on configuring this file:
#
#   http://www.sphinx-doc.org/en/stable/config.html

import os
import sys

# The package is documented from the source tree
sys.path.insert(0, os.path.abspath("../../"))

# -- General configuration ----------------------------------------------------

extensions = [
    "sphinx.ext.autodoc",
    "sphinx.ext.mathjax",
    "sphinxarg.ext",
    "sphinx_autodoc_typehints",
    "sphinx_rtd_theme",
    "pbr.sphinxext",
]

autodoc_member_order = "bysource"

templates_path = ["_templates"]

source_suffix = [".rst"]

master_doc = "index"

project = "odskd"
copyright = "2024-present, odskd developers"
author = "odskd developers"

exclude_patterns = []

add_module_names = False
show_authors = False

pygments_style = "sphinx"

modindex_common_prefix = ["odskd."]

# -- Options for HTML output --------------------------------------------------

html_theme = "sphinx_rtd_theme"
html_static_path = []
html_last_updated_fmt = "%Y-%m-%d %H:%M"
html_use_smartypants = False

html_sidebars = {
    "index": [
        "about.html",
        "navigation.html",
        "relations.html",
        "sourcelink.html",
        "searchbox.html",
    ],
}

html_always_document_param_types = True
html_show_sourcelink = False
html_show_sphinx = False
html_show_copyright = True

htmlhelp_basename = "ODSKDdoc"

# -- Options for LaTeX output -------------------------------------------------

latex_documents = [
    ("index", "odskd.tex", "ODSKD Documentation", author, "manual"),
]
