import setuptools
from setuptools import setup

setup(name='mqttz',
      version='0.1.0',
      description='Publish/subscribe broker with end-to-end payload encryption re-keyed inside a simulated trusted core',
      license='BSD',
      packages=setuptools.find_packages(exclude=['test']),
      zip_safe=False,
      python_requires='>=3.8',
      install_requires=[
            'numpy>=1.22',
            'pandas',
            'matplotlib',
            'scipy',
            'seaborn',
            'statsmodels',
            'tqdm',
            'cryptography>=3.1'
            ],
      entry_points={
            'console_scripts': [
                  'mqttz-broker=mqttz.MqttzBroker:main',
                  'mqttz-client=mqttz.MqttzClient:main',
                  'mqttz-bench=mqttz.MqttzBench:main',
                  'mqttz-devcert=mqttz.MqttzTls:main',
                  ]
            }
      )
